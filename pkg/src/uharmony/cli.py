"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, ablate. Exit codes: 0 ok,
2 configuration error, 3 numerical abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import kernels
from .errors import (
    ConfigurationError,
    DataError,
    InputError,
    NumericalAbort,
    VerificationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="uharmony",
        description="Two-stage feature harmonization/restoration segmentation harness",
    )
    p.add_argument("--seed", type=int, default=None, help="override the config/spec seed")
    p.add_argument("--dtype", choices=["f32", "f64"], default=None,
                   help="override the training dtype")
    p.add_argument("--threads", type=int, default=None,
                   help="compute threads for the conv backend (best effort)")
    p.add_argument("--conv-backend", choices=["auto", "numpy", "torch"], default=None,
                   help="conv3d compute backend (default auto)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic domain datasets")
    g.add_argument("--spec", nargs="+", required=True, help="domain spec JSON files")
    g.add_argument("--n", type=int, required=True, help="samples per domain")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="joint training over domain manifests")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--manifest", nargs="+", required=True, help="dataset manifest files")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, default=None,
                   help="pause after this epoch (resumable checkpoint)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", nargs="+", required=True)
    e.add_argument("--mode", choices=["dataset_free", "oracle"], default="dataset_free")
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--out", default=None, help="also write the table as CSV here")

    c = sub.add_parser("gradcheck", help="finite-difference verification suites")
    c.add_argument("--scope", choices=["ops", "uharmony", "end2end", "all"], default="all")
    c.add_argument("--inject-bug", default=None, help=argparse.SUPPRESS)

    a = sub.add_parser("ablate", help="run an ablation plan")
    a.add_argument("--plan", required=True, help="ablation plan JSON")
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--emit-plot-data", action="store_true",
                   help="write tidy long-format CSV for external plotting")
    return p


def _apply_global_flags(args) -> None:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        if kernels._HAVE_TORCH:
            kernels.torch.set_num_threads(args.threads)
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            pass
    if args.conv_backend is not None:
        try:
            kernels.set_conv_backend(args.conv_backend)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e


def _load_manifests(paths):
    from .synthdata import DatasetManifest

    return [DatasetManifest.load_file(p) for p in paths]


def cmd_gen_data(args) -> int:
    from .synthdata import DomainSpec, generate_domain

    specs = []
    for path in args.spec:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read spec {path}: {e}") from e
        if args.seed is not None:
            doc["seed"] = args.seed
        specs.append(DomainSpec.from_dict(doc))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate domain names across specs: {names}")
    for spec in specs:
        manifest = generate_domain(spec, args.n, args.out)
        print(Path(args.out) / f"{spec.name}_manifest.json")
        counts = {k: len(v) for k, v in manifest.splits.items()}
        print(f"  {spec.name}: {counts}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_experiment_config
    from .train import train

    cfg, bcfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dtype is not None:
        cfg.dtype = args.dtype
    manifests = _load_manifests(args.manifest)
    result = train(cfg, bcfg, manifests, args.out,
                   resume_from=args.resume, stop_after=args.stop_after)
    print(result.checkpoint_path)
    print(result.metrics_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_checkpoint

    report = evaluate_checkpoint(
        args.checkpoint, _load_manifests(args.manifest),
        mode=args.mode, split=args.split,
    )
    print(report.table())
    if args.out:
        Path(args.out).write_text("\n".join(report.csv_lines()) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    reports = run_suite(scope=args.scope, inject_bug=args.inject_bug,
                        seed=args.seed or 0)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r.summary())
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    if failed:
        raise VerificationError(
            f"gradient checks failed: {', '.join(r.name for r in failed)}"
        )
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import load_plan, run_plan

    plan = load_plan(args.plan)
    summary = run_plan(plan, args.out, workers=args.workers,
                       emit_plot_data=args.emit_plot_data)
    print(summary.table())
    for line in summary.violations:
        print(f"TREND VIOLATION: {line}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_global_flags(args)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate,
        }[args.command]
        return handler(args)
    except (ConfigurationError, DataError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
