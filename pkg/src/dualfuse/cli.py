"""Command line entry point: synth, train, fuse, eval-fusion, eval-detect, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .imagecore import load_all, read_manifest
from .trainloop import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("dualfuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.type in (bool, "bool"):
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        kind = {int: int, float: float, str: str}.get(type(default), int)
        if f.name == "strategy":
            p.add_argument(flag, choices=["dt", "tt", "ct"], default=default)
        elif f.name == "mask_source":
            p.add_argument(flag, choices=["ground_truth", "threshold_saliency"], default=default)
        else:
            p.add_argument(flag, type=kind, default=default)
    p.add_argument("--no-dt-critic", dest="use_dt_critic", action="store_false")
    p.add_argument("--no-dd-critic", dest="use_dd_critic", action="store_false")
    p.add_argument("--no-sdw", dest="use_sdw", action="store_false")
    p.add_argument("--no-mask", dest="use_mask", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic paired dataset")
    p.add_argument("--out", type=Path, default=Path("data"))
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", choices=["train", "val", "test"], default="train")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--texture", type=float, default=0.08)
    p.add_argument("--classes", type=int, default=3)

    p = sub.add_parser("train", help="train with the dt, tt or ct strategy")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("runs/latest"))
    _add_train_flags(p)

    p = sub.add_parser("fuse", help="fuse a pair or a whole manifest into 8-bit PNGs")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pair-id")
    p.add_argument("--out", type=Path)

    for name in ("eval-fusion", "eval-detect"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} evaluation over a manifest")
        p.add_argument("--manifest", type=Path, required=True)
        src = p.add_mutually_exclusive_group(required=(name == "eval-fusion"))
        src.add_argument("--checkpoint", type=Path)
        if name == "eval-fusion":
            src.add_argument("--oracle", choices=["copy-x", "average"])
        else:
            p.add_argument("--conf-thresh", type=float, default=0.25)
            p.add_argument("--nms-iou", type=float, default=0.45)
        p.add_argument("--out", type=Path, help="JSON-lines report path")

    p = sub.add_parser("gradcheck", help="finite-difference suites and gradient decomposition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    return parser


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_dataset

    cfg = SynthConfig(count=args.count, image_size=args.size, seed=args.seed, split=args.split,
                      noise=args.noise, texture=args.texture, num_classes=args.classes)
    manifest = synth_dataset(cfg, args.out)
    print(f"wrote {len(manifest)} pairs to {args.out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainloop import save_checkpoint, train

    names = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig.from_dict({k: v for k, v in vars(args).items() if k in names})
    manifest = read_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    state = train(cfg, manifest, log_path=log_path, checkpoint_dir=args.out / "checkpoints")
    final = save_checkpoint(state, args.out / "final.pt")
    last = state.history[-1] if state.history else {}
    print(f"strategy={cfg.strategy} steps={state.step} checkpoint={final}")
    if last:
        print(json.dumps({k: v for k, v in last.items() if v is not None}))
    return EXIT_OK


def _generator(checkpoint: Path):
    from .trainloop import load_checkpoint

    return load_checkpoint(checkpoint)


def cmd_fuse(args) -> int:
    from .evaluate import generator_fuser
    from .imagecore import GrayImage, load_pair, save_png

    manifest = read_manifest(args.manifest)
    state = _generator(args.checkpoint)
    fuse = generator_fuser(state.generator)
    out = args.out or Path(manifest.root_path) / "fused"
    out.mkdir(parents=True, exist_ok=True)
    ids = [args.pair_id] if args.pair_id else manifest.pair_ids
    for pid in ids:
        pair = load_pair(manifest, pid)
        u = fuse(pair.infrared.data, pair.visible.data).clip(0.0, 1.0)
        save_png(out / f"{pid}.png", GrayImage(u))
    print(f"fused {len(ids)} pair(s) into {out}")
    return EXIT_OK


def cmd_eval_fusion(args) -> int:
    from .evaluate import eval_fusion

    manifest = read_manifest(args.manifest)
    fuser = args.oracle if args.oracle else _generator(args.checkpoint).generator
    report = eval_fusion(manifest, fuser)
    if args.out:
        report.write(args.out)
    print(report.summary())
    return EXIT_OK


def cmd_eval_detect(args) -> int:
    from .evaluate import eval_detection

    manifest = read_manifest(args.manifest)
    if args.checkpoint is None:
        raise UsageError("eval-detect needs --checkpoint")
    state = _generator(args.checkpoint)
    report = eval_detection(manifest, state.generator, state.detector, args.conf_thresh, args.nms_iou)
    if args.out:
        report.write(args.out)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import DECOMP_TOL, REL_TOL, run_suites
    from .synth import SynthConfig, make_pair
    from .trainloop import gradient_decomposition_check, init_state, make_batch

    ok = True
    for name, err in run_suites(args.seed, args.trials).items():
        passed = err <= REL_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  fd/{name:<20} max rel err {err:.3e} (tol {REL_TOL:g})")

    cfg = TrainConfig(seed=args.seed, patch_size=32, batch_size=2)
    state = init_state(cfg)
    pairs = [make_pair(SynthConfig(count=2, image_size=32, seed=args.seed), i) for i in range(2)]
    batch = make_batch(pairs, cfg)
    for lam in (0.0, 0.5, 1.0):
        rep = gradient_decomposition_check(state, batch, lam)
        passed = rep["max_residual"] <= DECOMP_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  decomposition lam={lam:<4} residual {rep['max_residual']:.3e} "
              f"cross {rep['cross_term_norm']:.3e} fusion {rep['fusion_term_norm']:.3e}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval-fusion": cmd_eval_fusion,
    "eval-detect": cmd_eval_detect,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
