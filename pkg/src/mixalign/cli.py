"""Command line entry point: ``mixalign {train,eval,ablate,gradcheck,datapreview}``.

Results go to stdout as one JSON object per line. Failures print a single
JSON line ``{"error": <kind>, "message": <text>}`` to stderr and exit
nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "write_ppm"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) from a [3, H, W] float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {image.shape}")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float), flush=True)


def _load_config(path):
    from .config import TrainConfig

    return TrainConfig() if path is None else TrainConfig.load(path)


def _cmd_train(args) -> int:
    from .training import run_train

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.epochs is not None:
        cfg.run.epochs = args.epochs
    result = run_train(cfg, args.out, resume=args.resume)
    _emit({
        "out_dir": str(result.out_dir),
        "epochs_run": result.estimator.epoch_,
        "best_epoch": result.estimator.best_epoch_,
        "val": result.val.as_row(),
        "heldout": result.heldout.as_row(),
    })
    return 0


def _cmd_eval(args) -> int:
    from .training import run_eval

    expected = _load_config(args.config) if args.config else None
    report = run_eval(args.ckpt, args.split, config=expected, out_path=args.out)
    _emit({"split": args.split, **report.as_row()})
    return 0


def _cmd_ablate(args) -> int:
    from .training import run_ablation

    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.run.epochs = args.epochs
    _, summary = run_ablation(cfg, args.seeds, components=args.components, out_dir=args.out)
    for row in summary:
        _emit(row)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seeds=args.seeds, e2e_seeds=args.e2e_seeds)
    worst: dict[str, tuple[float, float]] = {}
    for r in results:
        prev = worst.get(r.name, (0.0, r.tolerance))
        worst[r.name] = (max(prev[0], r.max_rel_error), r.tolerance)
    for name, (err, tol) in worst.items():
        _emit({"case": name, "max_rel_error": err, "tolerance": tol, "passed": err < tol})
    failed = [n for n, (e, t) in worst.items() if not e < t]
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")
    return 0


def _cmd_datapreview(args) -> int:
    from .data import generate_sample, make_domains
    from .data import _domain_labels  # label order used by the real splits

    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, heldout = make_domains(cfg.data.n_train_domains, cfg.data.n_heldout_domains, seed=cfg.data_seed)
    for spec in train + heldout:
        labels = _domain_labels(cfg.data_seed, spec.domain_id, cfg.data.n_per_domain, cfg.data.imbalance_ratio)
        tiles = [generate_sample(cfg.data_seed, spec, i, int(labels[i])) for i in range(args.n)]
        grid = np.concatenate(tiles, axis=2)
        grid = grid.repeat(args.scale, axis=1).repeat(args.scale, axis=2)
        kind = "train" if spec in train else "heldout"
        path = out / f"domain{spec.domain_id}_{kind}.ppm"
        write_ppm(path, grid)
        _emit({"domain": spec.domain_id, "kind": kind, "file": str(path), "labels": labels[: args.n].tolist()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="INI config (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: run.out_dir)")
    p.add_argument("--epochs", type=int, help="override run.epochs")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "heldout"), default="heldout")
    p.add_argument("--config", help="warn if this config differs from the checkpoint's")
    p.add_argument("--out", help="CSV report path (default: next to the checkpoint)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="component x seed ablation matrix")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, help="override run.epochs")
    p.add_argument("--components", nargs="+", default=["none", "mixstyle", "align", "kd", "all"],
                   choices=["none", "mixstyle", "align", "kd", "all"])
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--e2e-seeds", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("datapreview", help="write sample images per domain as PPM files")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=8, help="samples per domain")
    p.add_argument("--scale", type=int, default=4, help="pixel upscaling factor")
    p.set_defaults(func=_cmd_datapreview)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        message = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
