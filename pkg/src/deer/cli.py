"""``deer`` command line: train, eval, infer, visualize, config."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(text: str) -> str:
    low = text.lower()
    if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
        raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")
    return low


def _assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'section.key = value' lines")
    p.add_argument("--set", dest="overrides", action="append", type=_assignment, default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for numeric kernels (default: $DEER_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deer", description="Detection-agnostic scene text spotting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--detection-supervision", type=_bool, help="train the location head (true/false)")
    p.add_argument("--perturb", type=_bool, help="jitter training reference points (true/false)")
    p.add_argument("--dataset", help="directory of images and annotation files (default: synthetic)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="directory of images and annotation files")
    p.add_argument("--synthetic", type=int, default=200, help="number of held-out synthetic images")
    p.add_argument("--data-seed", type=int, default=10_000, help="seed of the held-out synthetic set")
    p.add_argument("--lexicon", help="word list, one per line")
    p.add_argument("--ic15-rules", action="store_true")
    p.add_argument("--gt-points", action="store_true", help="read at ground-truth reference points")
    p.add_argument("--point-mode", choices=("center", "inner"))
    p.add_argument("--beta", help="comma-separated shifts toward the top-left corner, or 'sweep'")
    p.add_argument("--long-side", type=int)
    p.add_argument("--out", default="runs/eval", help="output directory (report goes to OUT/eval/)")

    p = sub.add_parser("infer", help="spot text in images")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", default="runs/infer")
    p.add_argument("--long-side", type=int)
    p.add_argument("--point-mode", choices=("center", "inner"))
    p.add_argument("--overlay", action="store_true", help="also write annotated copies of the images")

    p = sub.add_parser("visualize", help="decoder attention maps for one reference point")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--ref", default="auto", help="'x,y' in image pixels, or 'auto' (first detection)")
    p.add_argument("--out", default="runs/viz", help="output directory (maps go to OUT/viz/)")
    p.add_argument("--long-side", type=int)

    p = sub.add_parser("config", help="print the configuration reference or a resolved config")
    _common(p)
    p.add_argument("--resolved", action="store_true", help="print the merged configuration instead")
    return parser


# ----------------------------------------------------------------------------
# helpers


def _setup_threads(n: int | None) -> int:
    if n is None:
        env = os.environ.get("DEER_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"DEER_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _run_config(args, extra=()):
    from .config import load_config

    return load_config(args.config, list(args.overrides) + list(extra))


def _load_model(checkpoint: str, args):
    """Model built from the config stored in the checkpoint, then command-line overrides."""
    from .config import build_config, parse_assignments
    from .model import DEER
    from .training import checkpoint_meta, load_checkpoint

    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint not found: {checkpoint}")
    meta = checkpoint_meta(checkpoint)
    stored = parse_assignments(meta, checkpoint) if meta else []
    assignments = [kv for kv in stored if kv[0].startswith(("model.", "data.", "eval."))]
    if args.config is not None:
        assignments += _file_assignments(args.config)
    cfg = build_config(assignments + list(args.overrides))
    model = DEER(cfg.model)
    load_checkpoint(checkpoint, model)
    return model, cfg


def _file_assignments(path):
    from .config import parse_assignments

    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_assignments(Path(path).read_text(), path)


def _eval_config(cfg, args):
    from dataclasses import replace

    ec = cfg.eval
    if getattr(args, "long_side", None):
        ec = replace(ec, long_side=args.long_side)
    if getattr(args, "point_mode", None):
        ec = replace(ec, point_mode=args.point_mode)
    if getattr(args, "ic15_rules", False):
        ec = replace(ec, ic15_rules=True)
    if getattr(args, "gt_points", False):
        ec = replace(ec, gt_points=True)
    return ec


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .config import format_config
    from .data import load_dataset
    from .model import DEER
    from .training import load_checkpoint, train

    extra = []
    if args.steps is not None:
        extra.append(("train.total_steps", str(args.steps)))
    if args.seed is not None:
        extra.append(("train.seed", str(args.seed)))
    if args.detection_supervision is not None:
        extra.append(("train.detection_supervision", args.detection_supervision))
    if args.perturb is not None:
        extra.append(("train.perturb_enabled", args.perturb))
    explicit = {k for k, _ in list(args.overrides) + extra}
    if args.config:
        explicit |= {k for k, _ in _file_assignments(args.config)}
    if args.steps is not None and "train.warmup_steps" not in explicit:
        from .training import TrainConfig

        warmup = min(TrainConfig.warmup_steps, max(args.steps // 10, 1), max(args.steps - 1, 0))
        extra.append(("train.warmup_steps", str(warmup)))
    cfg = _run_config(args, extra)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in ("checkpoints", "eval", "viz"):
        (out / d).mkdir(exist_ok=True)
    resolved = format_config(cfg)
    (out / "config.resolved").write_text(resolved)

    dataset = load_dataset(args.dataset, cfg.data.shrink_ratio) if args.dataset else None
    model = DEER(cfg.model)
    state = None
    if args.resume:
        if not os.path.exists(args.resume):
            raise UsageError(f"checkpoint not found: {args.resume}")
        state = load_checkpoint(args.resume, model)
    log = None if args.quiet else (lambda line: print(line, flush=True))
    train(model, cfg.train, cfg.data, out, state=state, dataset=dataset, aug_cfg=cfg.augment,
          log=log, meta=resolved)
    from .viz import plot_training_curves

    plot_training_curves(out / "metrics.tsv", out / "viz" / "training_curves.png")
    print(f"wrote {out / 'checkpoints' / 'last.ckpt'}")
    return EXIT_OK


def _eval_dataset(args, cfg):
    from .data import generate_dataset, load_dataset

    if args.dataset:
        return load_dataset(args.dataset, cfg.data.shrink_ratio)
    return generate_dataset(args.data_seed, args.synthetic, cfg.data)


def _parse_betas(text: str) -> list[float]:
    from .evaluation import DEFAULT_BETAS

    if text == "sweep":
        return list(DEFAULT_BETAS)
    try:
        betas = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--beta expects numbers or 'sweep', got {text!r}") from None
    if not betas or any(not 0 <= b <= 1 for b in betas):
        raise UsageError("--beta values must lie in [0, 1]")
    return betas


def cmd_eval(args) -> int:
    from dataclasses import replace

    from .evaluation import evaluate, format_beta_csv, run_beta_ablation

    betas = _parse_betas(args.beta) if args.beta is not None else None
    lexicon = None
    if args.lexicon:
        if not os.path.exists(args.lexicon):
            raise UsageError(f"lexicon not found: {args.lexicon}")
        lexicon = [w.strip() for w in Path(args.lexicon).read_text().splitlines() if w.strip()]
        if not lexicon:
            raise UsageError(f"lexicon is empty: {args.lexicon}")
    model, cfg = _load_model(args.checkpoint, args)
    ec = _eval_config(cfg, args)
    dataset = _eval_dataset(args, cfg)
    out = Path(args.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)

    if betas is None:
        report = evaluate(model, dataset, ec, lexicon)
        text = report.format()
    else:
        ec = replace(ec, gt_points=True)
        report = evaluate(model, dataset, ec, lexicon, beta=betas[0])
        curve = run_beta_ablation(model, dataset, betas, ec)
        report.sections["beta_ablation"] = {f"f_beta_{b:.2f}": f for b, f in curve.items()}
        text = report.format()
        (out / "beta_curve.csv").write_text(format_beta_csv(curve))
        from .viz import plot_beta_curves

        plot_beta_curves({Path(args.checkpoint).stem: curve}, out / "beta_curve.png")
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import spot
    from .imageio import read_image

    for path in args.images:
        if not os.path.exists(path):
            raise UsageError(f"image not found: {path}")
    model, cfg = _load_model(args.checkpoint, args)
    ec = _eval_config(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = read_image(path)
        results = spot(model, image, ec)
        lines = []
        for r in results:
            coords = ",".join(f"{v:.2f}" for v in r.polygon.to_flat())
            lines.append(f"{coords}\t{r.text}\t{r.confidence:.4f}\n")
        stem = Path(path).stem
        (out / f"{stem}.txt").write_text("".join(lines))
        if args.overlay:
            from .viz import render_overlay

            render_overlay(image, results, out / f"{stem}_overlay.png")
        print(f"{path}: {len(results)} instance(s)")
    return EXIT_OK


def cmd_visualize(args) -> int:
    import numpy as np

    from .data import resize_for_inference
    from .evaluation import spot
    from .imageio import read_image
    from .viz import attention_maps, save_heatmap

    if not os.path.exists(args.image):
        raise UsageError(f"image not found: {args.image}")
    model, cfg = _load_model(args.checkpoint, args)
    ec = _eval_config(cfg, args)
    image = read_image(args.image)
    padded, info = resize_for_inference(image, ec.long_side)
    if args.ref == "auto":
        found = spot(model, image, ec)
        ref = found[0].reference if found else np.array([image.shape[1] / 2, image.shape[0] / 2])
    else:
        try:
            ref = np.array([float(v) for v in args.ref.split(",")])
        except ValueError:
            raise UsageError(f"--ref expects x,y or auto, got {args.ref!r}") from None
        if ref.shape != (2,):
            raise UsageError(f"--ref expects x,y or auto, got {args.ref!r}")
    ref_resized = ref / np.array([info.scale_x, info.scale_y])
    out = Path(args.out) / "viz"
    out.mkdir(parents=True, exist_ok=True)
    for n, kind, heat in attention_maps(model, padded, ref_resized):
        path = out / f"layer{n}_{kind}.png"
        save_heatmap(heat, path)
        print(path)
    return EXIT_OK


def cmd_config(args) -> int:
    from .config import format_config, reference_page

    sys.stdout.write(format_config(_run_config(args)) if args.resolved else reference_page())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "visualize": cmd_visualize,
            "config": cmd_config}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_threads(args.threads)
        from .tensor import ConfigurationError

        try:
            return COMMANDS[args.command](args)
        except (ConfigurationError, FileNotFoundError) as exc:
            raise UsageError(str(exc)) from None
    except UsageError as exc:
        print(f"deer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"deer {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
