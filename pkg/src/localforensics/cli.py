"""Command-line entry point: ``localforensics <subcommand> ...``.

Exit codes: 0 success, 1 validation/config error, 2 I/O error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(payload, indent=None if args.json else 2, default=str))
    else:
        print(text)


def _kv_list(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _arch(args):
    from .config import load_config
    from .model import ArchConfig

    return load_config(ArchConfig, getattr(args, "arch_config", None) or getattr(args, "config", None),
                       _kv_list(getattr(args, "set_arch", None)))


def _train_cfg(args):
    from .config import load_config
    from .trainer import TrainConfig

    over = _kv_list(args.set_train)
    for flag in ("epochs", "seed", "batch_size", "lr", "patience"):
        v = getattr(args, flag, None)
        if v is not None:
            over[flag] = str(v)
    return load_config(TrainConfig, args.train_config, over)


# --------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .dataio import SynthParams, synth_dataset

    p = SynthParams(count=args.count, size=args.size, seed=args.seed, amplitude=args.amplitude,
                    levels=args.levels, smoothing=args.smoothing, emit_clean=not args.no_clean)
    m = synth_dataset(p, args.out)
    _emit(args, {"out": str(args.out), "samples": len(m), "objectives": m.objectives, **m.stats})
    return EXIT_OK


def cmd_mask(args) -> int:
    from .maskgen import convex_hull_mask, load_landmarks, ones_mask, save_mask_png, zeros_mask

    if args.kind == "zm":
        mask = zeros_mask(args.height, args.width)
    elif args.kind == "om":
        mask = ones_mask(args.height, args.width)
    else:
        if not args.landmarks:
            raise ValueError("--kind cvm requires --landmarks")
        mask = convex_hull_mask(load_landmarks(args.landmarks), args.height, args.width)
    save_mask_png(mask, args.out)
    _emit(args, {"out": str(args.out), "kind": args.kind, "positive_pixels": int(mask.sum())})
    return EXIT_OK


def cmd_rf(args) -> int:
    from .model import REQUIRED_RF, receptive_field

    cfg = _arch(args)
    info = receptive_field(cfg)
    rows = [
        {"layer": i + 1, "kind": l.kind, "kernel": l.kernel, "stride": l.stride, "rf": l.rf, "jump": l.jump, "offset": l.center}
        for i, l in enumerate(info.layers)
    ]
    ok = info.rf == REQUIRED_RF or cfg.allow_rf_override
    lines = [f"{r['layer']:>2} {r['kind']:<4} k={r['kernel']} s={r['stride']}  rf={r['rf']} jump={r['jump']} offset={r['offset']}"
             for r in rows]
    lines.append(f"final rf={info.rf} jump={info.jump} offset={info.center_offset}")
    _emit(args, {"layers": rows, "final": {"rf": info.rf, "jump": info.jump, "offset": info.center_offset},
                 "ok": ok}, "\n".join(lines))
    if not ok:
        raise CheckFailed(f"final receptive field {info.rf} != {REQUIRED_RF}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import load_manifest
    from .trainer import train

    arch = _arch(args)
    cfg = _train_cfg(args)
    res = train(load_manifest(args.train_manifest), load_manifest(args.val_manifest), arch, cfg, args.out_dir)
    _emit(args, {"best_epoch": res.best_epoch, "best_val_accuracy": res.best_val_accuracy,
                 "checkpoint": str(res.checkpoint), "epochs_run": len(res.history)})
    return EXIT_OK


def _mode(name: str) -> str:
    return name.replace("-", "_")


def cmd_eval(args) -> int:
    from .dataio import load_manifest, preload, select_objectives
    from .experiments import size_sweep
    from .model import load_checkpoint
    from .trainer import evaluate

    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    names = args.objectives.split(",") if args.objectives else manifest.objectives[: model.config.num_seg_heads]
    ds = preload(select_objectives(manifest, [n for n in names if n]))
    m = evaluate(model, ds, _mode(args.mode), head=args.head, crop_size=args.crop_size)
    out = Path(args.out_dir)
    m.write(out)
    payload = m.summary()
    if args.sizes:
        sizes = [int(s) for s in args.sizes.split(",")]
        payload["sizes"] = size_sweep(model, ds, sizes, head=args.head, out_csv=out / "sizes.csv")
    _emit(args, payload)
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np
    from PIL import Image

    from .dataio import load_image
    from .model import forward, load_checkpoint
    from .tensor import log_softmax

    model = load_checkpoint(args.checkpoint)
    if args.image:
        paths = [Path(args.image)]
    elif args.dir:
        paths = sorted(p for p in Path(args.dir).iterdir() if p.suffix.lower() == ".png")
    else:
        raise ValueError("pass --image or --dir")
    results = []
    for p in paths:
        x = load_image(p).data
        if args.crop_size:
            c = args.crop_size
            h, w = x.shape[1:]
            if c > h or c > w:
                raise ValueError(f"{p}: crop {c} larger than image {h}x{w}")
            r0, c0 = (h - c) // 2, (w - c) // 2
            x = x[:, r0:r0 + c, c0:c0 + c]
        out = forward(model, np.ascontiguousarray(x[None]), "eval")
        p_cls = float(np.exp(log_softmax(out.image_logits.data.astype(np.float64)))[0, 1])
        rec = {"image": str(p), "grid": list(out.grid), "p_fake_classifier": p_cls}
        if out.seg_logits:
            seg = np.exp(log_softmax(out.seg_logits[args.head].data.astype(np.float64)))[0, 1]
            rec["p_fake_seg_mean"] = float(seg.mean())
            if args.heatmap_dir:
                hd = Path(args.heatmap_dir)
                hd.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(seg * 255).astype(np.uint8), mode="L").save(hd / f"{p.stem}_seg.png")
        rec["p_fake"] = rec["p_fake_seg_mean"] if _mode(args.mode) == "seg_mean" and out.seg_logits else p_cls
        results.append(rec)
    if args.json:
        print(json.dumps(results))
    else:
        for r in results:
            print(f"{r['image']}\tp_fake={r['p_fake']:.6f}\tgrid={r['grid'][0]}x{r['grid'][1]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.seed)
    payload = [{"op": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed, "seconds": r.seconds} for r in results]
    text = "\n".join(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max_rel_err={r.max_rel_error:.3e}" for r in results)
    _emit(args, {"checks": payload, "passed": all(r.passed for r in results)}, text)
    if not all(r.passed for r in results):
        raise CheckFailed("gradient check failed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .dataio import load_manifest
    from .experiments import ablation_means, run_ablation

    arch = _arch(args)
    cfg = _train_cfg(args)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    rows = run_ablation(load_manifest(args.train_manifest), load_manifest(args.val_manifest),
                        load_manifest(args.test_manifest), arch, cfg, lambdas, seeds, args.objective, args.out_dir)
    means = ablation_means(rows)
    _emit(args, {"rows": len(rows), "results_csv": str(Path(args.out_dir) / "results.csv"),
                 "means": {str(k): v for k, v in means.items()}})
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localforensics", description=__doc__.splitlines()[0])
    ap.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic manipulation dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=100, help="images per class")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.02)
    p.add_argument("--levels", type=int, default=32)
    p.add_argument("--smoothing", type=int, default=3)
    p.add_argument("--no-clean", action="store_true", help="skip writing pre-artifact renders")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="write a ZM/OM/CVM mask PNG")
    p.add_argument("--landmarks", type=Path)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--kind", choices=("zm", "om", "cvm"), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("rf", help="print receptive-field geometry")
    p.add_argument("--config", type=Path)
    p.add_argument("--set-arch", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_rf)

    def train_flags(p):
        p.add_argument("--arch-config", type=Path)
        p.add_argument("--train-config", type=Path)
        p.add_argument("--set-arch", action="append", metavar="KEY=VALUE")
        p.add_argument("--set-train", action="append", metavar="KEY=VALUE")
        p.add_argument("--train-manifest", type=Path, required=True)
        p.add_argument("--val-manifest", type=Path, required=True)
        p.add_argument("--out-dir", type=Path, required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--patience", type=int)

    p = sub.add_parser("train", help="train a model")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=("classifier", "seg-mean"), default="classifier")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--objectives", help="comma-separated manifest objectives bound to the seg heads")
    p.add_argument("--crop-size", type=int)
    p.add_argument("--sizes", help="comma-separated crop sizes for a both-mode size sweep (sizes.csv)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="fake probability for single images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path)
    p.add_argument("--dir", type=Path)
    p.add_argument("--mode", choices=("classifier", "seg-mean"), default="classifier")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--heatmap-dir", type=Path)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="lambda_seg x seed grid")
    train_flags(p)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--lambdas", default="0.0,0.2,0.3,0.5,0.7")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--objective", default="fake")
    p.set_defaults(func=cmd_ablate)
    return ap


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    from .errors import ConfigError, FormatError

    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
