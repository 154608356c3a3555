"""Command-line entry point: synth, train-seg, train-mat, infer, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import config as C
from . import tensor as T
from .data import DatasetError, composite, dataset_read, dataset_write, gen_dataset, read_png, write_png
from .metrics import METRIC_KEYS, evaluate_dir
from .model import SGHM
from .tensor import NonFiniteError, Tensor
from .train import train_matting, train_segmentation

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PAD_MULTIPLE = 64
NAMED_COLORS = {"green": (0, 255, 0), "blue": (0, 0, 255), "black": (0, 0, 0), "white": (255, 255, 255),
                "red": (255, 0, 0), "gray": (128, 128, 128)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_epilog() -> str:
    lines = ["config keys (file syntax: 'key = value', '#' starts a comment):"]
    for key, default, text in C.key_help():
        lines.append(f"  {key} = {default}\n      {text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="sghm", description="Semantic-guided human matting on synthetic data.",
                epilog=config_epilog(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, required=True, help="number of samples")
    s.add_argument("--size", type=int, default=64, help="side length, divisible by 64")
    s.add_argument("--seed", type=int, default=0, help="dataset seed")

    for name, text in (("train-seg", "stage 1: encoder + segmentation decoder"),
                       ("train-mat", "stage 2: matting decoder with frozen segmentation")):
        t = sub.add_parser(name, help=text, epilog=config_epilog(), formatter_class=fmt)
        t.add_argument("--config", help="run config file (defaults when omitted)")
        t.add_argument("--data", help="dataset directory (overrides the 'data' key)")
        t.add_argument("--out", required=True, help="output checkpoint")
        t.add_argument("--log", help="metrics log path (overrides 'metrics_log'; default <out>.log)")
        if name == "train-mat":
            t.add_argument("--encoder-ckpt", help="stage-1 checkpoint (required)")

    i = sub.add_parser("infer", help="predict an alpha matte for one image")
    i.add_argument("--ckpt", required=True, help="trained checkpoint")
    i.add_argument("--input", required=True, help="input RGB PNG")
    i.add_argument("--alpha-out", required=True, help="output 8-bit alpha PNG")
    i.add_argument("--mask-out", help="also write the segmentation mask, upsampled to input size")
    i.add_argument("--composite-out", help="also write alpha * image + (1 - alpha) * bg")
    i.add_argument("--bg", default="green", help="composite background: name, #rrggbb or r,g,b")

    e = sub.add_parser("eval", help="score predicted alphas against ground truth")
    e.add_argument("--pred", required=True, help="directory of predicted alpha PNGs")
    e.add_argument("--gt", required=True, help="directory of ground-truth alpha PNGs")
    e.add_argument("--report", required=True, help="report path (table; '<report>.json' holds the records)")
    return p


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size < PAD_MULTIPLE or args.size % PAD_MULTIPLE:
        raise UsageError(f"--size must be a positive multiple of {PAD_MULTIPLE}, got {args.size}")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(args.out)
    samples = gen_dataset(args.count, args.size, args.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dataset_write(out, samples)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    for idx, s in enumerate(samples):
        soft = float(((s.alpha > 0) & (s.alpha < 1)).mean())
        print(f"{idx:05d}\t{args.size}x{args.size}\tmean_alpha={float(s.alpha.mean()):.4f}\tsoft={soft:.4f}")
    return EXIT_OK


def _run_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    if args.data:
        cfg.paths.data = args.data
    if args.log:
        cfg.paths.metrics_log = args.log
    return cfg


def _samples(cfg: C.RunConfig):
    if cfg.paths.data:
        samples = dataset_read(cfg.paths.data)
        if not samples:
            raise DatasetError(f"dataset {cfg.paths.data} is empty")
        return samples
    if cfg.train.num_samples == 0:
        raise UsageError("no --data given and num_samples = 0")
    return gen_dataset(cfg.train.num_samples, cfg.train.sample_size, cfg.train.data_seed)


def _log_path(cfg: C.RunConfig, out: str) -> str:
    return cfg.paths.metrics_log or out + ".log"


def cmd_train_seg(args) -> int:
    cfg = _run_config(args)
    samples = _samples(cfg)
    model = SGHM(cfg.model)
    result = train_segmentation(model, samples, cfg.train, _log_path(cfg, args.out))
    ckpt_io.save(args.out, model, cfg, result.optimizer.state_tensors())
    print(f"stage 1 done: {len(result.losses)} steps, final loss {result.losses[-1]:.6g}, wrote {args.out}")
    return EXIT_OK


def cmd_train_mat(args) -> int:
    if not args.encoder_ckpt:
        raise UsageError("train-mat requires --encoder-ckpt (a stage-1 checkpoint)")
    cfg = _run_config(args)
    stage1 = ckpt_io.load(args.encoder_ckpt)
    samples = _samples(cfg)
    model = SGHM(cfg.model)
    ckpt_io.assign(model, {k: v for k, v in stage1.tensors.items() if model.group_of(k) != "mat"},
                   groups=("encoder", "seg"))
    result = train_matting(model, samples, cfg.train, _log_path(cfg, args.out))
    ckpt_io.save(args.out, model, cfg, result.optimizer.state_tensors())
    print(f"stage 2 done: {len(result.losses)} steps, final loss {result.losses[-1]:.6g}, wrote {args.out}")
    return EXIT_OK


def parse_color(text: str) -> np.ndarray:
    t = text.strip().lower()
    if t in NAMED_COLORS:
        rgb = NAMED_COLORS[t]
    elif t.startswith("#") and len(t) == 7:
        try:
            rgb = tuple(int(t[i:i + 2], 16) for i in (1, 3, 5))
        except ValueError:
            raise UsageError(f"bad --bg colour {text!r}") from None
    else:
        try:
            rgb = tuple(int(v) for v in t.split(","))
        except ValueError:
            raise UsageError(f"bad --bg colour {text!r}") from None
        if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
            raise UsageError(f"bad --bg colour {text!r}")
    return np.array(rgb, dtype=np.float32) / 255.0


def pad_to_multiple(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad ``(C, H, W)`` at the bottom/right up to the next multiple."""
    h, w = image.shape[1:]
    ph = -h % multiple
    pw = -w % multiple
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def infer_image(model: SGHM, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Alpha ``(1, H, W)`` and full-size mask for an arbitrary-size ``(3, H, W)`` image."""
    h, w = image.shape[1:]
    padded = pad_to_multiple(image)
    model.eval()
    out = model(Tensor(padded[None]))
    hp, wp = padded.shape[1:]
    mask = T.resize_bilinear(out.seg, hp, wp).data[0, :, :h, :w]
    return out.alpha.data[0, :, :h, :w], mask


def cmd_infer(args) -> int:
    bg = parse_color(args.bg) if args.composite_out else None
    model = ckpt_io.build_model(ckpt_io.load(args.ckpt))
    image = read_png(args.input, 3)
    alpha, mask = infer_image(model, image)
    write_png(args.alpha_out, alpha)
    if args.mask_out:
        write_png(args.mask_out, mask)
    if args.composite_out:
        back = np.broadcast_to(bg[:, None, None], image.shape)
        write_png(args.composite_out, composite(image, back, alpha))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_dir(args.pred, args.gt)
    try:
        report.write(args.report)
    except OSError as exc:
        raise DatasetError(f"cannot write report {args.report}: {exc}") from exc
    agg = report.aggregates
    print("\t".join(f"{k.upper()}={agg[k]!r}" for k in METRIC_KEYS))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train-seg": cmd_train_seg, "train-mat": cmd_train_mat,
            "infer": cmd_infer, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, C.ConfigError) as exc:
        print(f"sghm {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"sghm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ckpt_io.CheckpointError, T.ShapeError, OSError) as exc:
        print(f"sghm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())
