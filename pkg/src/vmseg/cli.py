"""Command-line entry point: generate, train, eval, segment, flops, verify.

Settings come from an optional key=value file (``--config``) overridden by
flags.  The effective settings are echoed to stderr before work starts.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger("vmseg")

SEED_ENV = "VMSEG_SEED"


class UsageError(Exception):
    pass


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _settings(args, keys: dict[str, type]) -> dict:
    """Merge config file values and explicit flags; flags win."""
    merged: dict = {}
    if args.config:
        file_vals = read_kv(args.config)
        for k, v in file_vals.items():
            if k in keys:
                merged[k] = keys[k](v)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def resolve_seed(args, settings: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in settings:
        return int(settings["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def derived_seed(seed: int, stream: int) -> int:
    from .train import fan_out
    return int(fan_out(seed, stream).generate_state(1)[0])


def echo(title: str, items: dict) -> None:
    print(f"# effective {title}", file=sys.stderr)
    for k, v in items.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(map(str, v))
        print(f"{k}={v}", file=sys.stderr)


def _range(text: str) -> tuple[float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected N or LO,HI, got {text!r}")
    return parts[0], parts[1]


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# generate


GEN_KEYS = {"out": str, "count": int, "size": int, "cracks": _range, "width": _range,
            "texture": float, "noise": float, "contrast": _range, "seed": int}


def cmd_generate(args) -> int:
    from .data import SynthConfig, generate_synthetic, write_dataset

    s = _settings(args, GEN_KEYS)
    if "out" not in s:
        raise UsageError("generate needs --out")
    kw = {"seed": resolve_seed(args, s)}
    for k in ("count", "size", "texture", "noise"):
        if k in s:
            kw[k] = s[k]
    if "cracks" in s:
        kw["cracks_min"], kw["cracks_max"] = (int(v) for v in s["cracks"])
    if "width" in s:
        kw["width_min"], kw["width_max"] = s["width"]
    if "contrast" in s:
        kw["contrast_min"], kw["contrast_max"] = s["contrast"]
    try:
        cfg = SynthConfig(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    echo("generator config", {"out": s["out"], **vars(cfg)})
    root = write_dataset(generate_synthetic(cfg), s["out"], cfg)
    print(f"wrote {cfg.count} image/mask pairs to {root}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train / eval / segment


MODEL_KEYS = {"preset": str, "embed_dim": int, "depths": _int_list, "decoder_depths": _int_list,
              "d_state": int, "expand": int, "dt_rank": str, "scan_mode": str,
              "shared_routes": _bool, "dtype": str}
TRAIN_KEYS = {"data": str, "out": str, "epochs": int, "lr": float, "batch_size": int,
              "weight_decay": float, "clip_norm": float, "augment": _bool, "seed": int,
              "splits": str, **MODEL_KEYS}

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)


def _fractions(text: str | None) -> tuple[float, float, float]:
    if not text:
        return DEFAULT_FRACTIONS
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9 or min(parts) < 0:
        raise UsageError(f"--splits needs three non-negative fractions summing to 1, got {text!r}")
    return parts


def _split(samples, seed: int, fractions):
    from .data import split_dataset
    from .train import STREAM_SPLIT
    return split_dataset(samples, fractions, derived_seed(seed, STREAM_SPLIT))


def _model_config(s: dict, seed: int, img_size: tuple[int, int]):
    from .train import STREAM_INIT
    from .vmunet import full_config, tiny_config

    preset = s.get("preset", "tiny")
    if preset not in ("tiny", "full"):
        raise UsageError(f"unknown preset {preset!r}; choose tiny or full")
    kw = {k: s[k] for k in MODEL_KEYS if k in s and k != "preset"}
    kw.update(img_size=img_size, seed=derived_seed(seed, STREAM_INIT))
    return (tiny_config if preset == "tiny" else full_config)(**kw)


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .metrics import write_metrics_csv
    from .train import TrainConfig, evaluate, train

    s = _settings(args, TRAIN_KEYS)
    for k in ("data", "out"):
        if k not in s:
            raise UsageError(f"train needs --{k}")
    seed = resolve_seed(args, s)
    samples = load_dataset(s["data"])
    if not samples:
        raise UsageError(f"no images found under {s['data']}")
    fractions = _fractions(s.get("splits"))
    tr, va, te = _split(samples, seed, fractions)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg = _model_config(s, seed, samples[0].mask.shape)
    tkw = {f.name: s[f.name] for f in fields(TrainConfig) if f.name in s}
    tkw.update(seed=seed, dtype=mcfg.dtype, checkpoint=str(out / "checkpoint.bin"),
               log_path=str(out / "train_log.csv"))
    tc = TrainConfig(**tkw)
    echo("model config", vars(mcfg))
    echo("training config", {**vars(tc), "data": s["data"], "splits": fractions,
                             "sizes": (len(tr), len(va), len(te))})
    (out / "config.txt").write_text(mcfg.to_text() + tc.to_text())
    train(mcfg, tr, tc, val=va, progress=args.verbose)
    model, meta = load_checkpoint(tc.checkpoint)
    if te:
        mds, miou, pairs = evaluate(model, te)
        with open(out / "test_metrics.csv", "w", newline="") as fh:
            write_metrics_csv(pairs, fh)
        print(f"best epoch {meta.get('epoch')}: test mDS {mds:.4f}  mIoU {miou:.4f}")
    return 0


EVAL_KEYS = {"checkpoint": str, "data": str, "out": str, "split": str, "splits": str, "seed": int}


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .metrics import write_metrics_csv
    from .train import evaluate

    s = _settings(args, EVAL_KEYS)
    for k in ("checkpoint", "data"):
        if k not in s:
            raise UsageError(f"eval needs --{k}")
    model, _ = load_checkpoint(s["checkpoint"])
    samples = load_dataset(s["data"])
    split = s.get("split", "all")
    if split != "all":
        if split not in SPLITS:
            raise UsageError(f"--split must be all, train, val or test, got {split!r}")
        samples = _split(samples, resolve_seed(args, s), _fractions(s.get("splits")))[SPLITS.index(split)]
    echo("eval config", {**s, "split": split, "images": len(samples)})
    mds, miou, pairs = evaluate(model, samples)
    text = write_metrics_csv(pairs)
    if "out" in s:
        Path(s["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"mDS {mds:.4f}  mIoU {miou:.4f}", file=sys.stderr)
    return 0


SEGMENT_KEYS = {"checkpoint": str, "input": str, "out": str}


def cmd_segment(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import LoadError, SegSample
    from .tensor import ConfigurationError
    from .train import predict_masks

    s = _settings(args, SEGMENT_KEYS)
    for k in ("checkpoint", "input", "out"):
        if k not in s:
            raise UsageError(f"segment needs --{k}")
    model, _ = load_checkpoint(s["checkpoint"])
    src = Path(s["input"])
    paths = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not paths or not all(p.exists() for p in paths):
        raise LoadError(f"no input images at {src}")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo("segment config", {**s, "images": len(paths)})
    for p in paths:
        with Image.open(p) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        sample = SegSample(np.ascontiguousarray(rgb.transpose(2, 0, 1)),
                           np.zeros(rgb.shape[:2], np.uint8), p.stem)
        if rgb.shape[:2] != tuple(model.cfg.img_size):
            raise ConfigurationError(f"{p.name}: size {rgb.shape[:2]} != model input {model.cfg.img_size}")
        mask = predict_masks(model, [sample])[0]
        Image.fromarray((mask * 255).astype(np.uint8), "L").save(out / f"{p.stem}.png")
    print(f"wrote {len(paths)} masks to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# flops / verify


def cmd_flops(args) -> int:
    from .flops import ARCHS, CONVENTION, flops_csv

    archs = [a.strip() for a in args.arch.split(",") if a.strip()]
    unknown = [a for a in archs if a not in ARCHS]
    if unknown:
        raise UsageError(f"unknown architecture(s) {unknown}; choose from {sorted(ARCHS)}")
    text = flops_csv(archs, args.resolutions)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"# {CONVENTION}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = args.suite or list(SUITES)
    failed = False
    for name in names:
        if name not in SUITES:
            raise UsageError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        kw = {"n": args.n} if args.n and name in ("equivalence", "metrics") else {}
        checks = SUITES[name](**kw)
        ok = all(c.passed for c in checks)
        failed |= not ok
        print(f"[{name}] {'PASS' if ok else 'FAIL'}")
        for c in checks:
            print("  " + c.line())
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file; flags override it")
    common.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads; 1 gives byte-identical reruns")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vmseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic crack dataset")
    g.add_argument("--out")
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--cracks", type=_range, help="N or LO,HI cracks per image")
    g.add_argument("--width", type=_range, help="crack width range in pixels")
    g.add_argument("--contrast", type=_range)
    g.add_argument("--texture", type=float)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train on an images/ + masks/ folder")
    t.add_argument("--data")
    t.add_argument("--out", help="directory for checkpoint.bin, train_log.csv, test_metrics.csv")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--augment", type=_bool)
    t.add_argument("--splits", help="train,val,test fractions (default 0.8,0.1,0.1)")
    t.add_argument("--preset", choices=("tiny", "full"))
    t.add_argument("--embed-dim", dest="embed_dim", type=int)
    t.add_argument("--depths", type=_int_list)
    t.add_argument("--decoder-depths", dest="decoder_depths", type=_int_list)
    t.add_argument("--d-state", dest="d_state", type=int)
    t.add_argument("--expand", type=int)
    t.add_argument("--dt-rank", dest="dt_rank")
    t.add_argument("--scan-mode", dest="scan_mode", choices=("exact", "simplified"))
    t.add_argument("--shared-routes", dest="shared_routes", type=_bool)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a folder")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", help="all (default), train, val or test")
    e.add_argument("--splits", help="fractions used when --split selects a subset")
    e.add_argument("--out", help="metrics CSV path (default stdout)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", parents=[common], help="write predicted mask PNGs")
    s.add_argument("--checkpoint")
    s.add_argument("--input", help="a PNG file or a directory of PNGs")
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    f = sub.add_parser("flops", parents=[common], help="analytic GFLOPs table as CSV")
    f.add_argument("--arch", default="vmunet,vit-core,cnn-core,hybrid-core")
    f.add_argument("--resolutions", type=_int_list, default=(224, 448, 896, 1792))
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)

    v = sub.add_parser("verify", parents=[common], help="run self-check suites")
    v.add_argument("--suite", action="append",
                   help="equivalence, gradients, discretization, metrics or complexity (repeatable)")
    v.add_argument("--n", type=int, help="instance count for randomized suites")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data import LoadError
    from .tensor import ConfigurationError, ContractError, DimensionError, NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (LoadError, CheckpointError, FileNotFoundError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigurationError, ContractError, DimensionError, NumericError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
