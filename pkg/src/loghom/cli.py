"""Command line interface.

One subcommand per experiment kind.  Every flag overrides the matching key
of the (optional) INI config file; the fully resolved config is persisted in
the run manifest so a run can be replayed from its output directory alone.

Exit codes: 0 success, 2 config error, 3 more than 5% of replicas failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, ExperimentFailure, LoghomError
from .experiment import EXPERIMENT_KINDS, ExperimentConfig, run_experiment

_KIND_DEFAULTS: dict[str, dict] = {
    "sample-field": dict(dim=2, n_per_side=128, amplitude=1.0, corr_length=2.0,
                         replicas=200),
    "correctors": dict(dim=2, n_per_side=64, amplitude=0.5, corr_length=2.0,
                       replicas=50),
    "radii": dict(dim=2, n_per_side=128, amplitude=1.0, corr_length=1.0,
                  replicas=100),
    "clt-scaling": dict(dim=2, n_per_side=256, amplitude=1.0, corr_length=2.0,
                        replicas=100, R_list=(8.0, 16.0, 32.0, 64.0)),
    "corrector-growth": dict(dim=2, n_per_side=256, amplitude=1.0, corr_length=2.0,
                             replicas=100, growth_offsets=(4, 8, 16, 32, 64)),
    "commutator": dict(dim=2, n_per_side=256, amplitude=0.5, corr_length=1.0,
                       replicas=200, eps_levels=(0.125, 0.0625, 0.03125)),
    "pathwise": dict(dim=2, n_per_side=128, amplitude=0.5, corr_length=1.0,
                     replicas=60, eps_levels=(0.125, 0.0625), tol=1e-8),
    "two-scale": dict(dim=3, n_per_side=64, amplitude=0.25, corr_length=1.0,
                      replicas=30, eps_levels=(0.25, 0.125, 0.0625), tol=1e-8),
    "hole-filling": dict(dim=2, n_per_side=128, amplitude=1.0, corr_length=2.0,
                         replicas=50),
    "mean-value": dict(dim=2, n_per_side=128, amplitude=0.5, corr_length=1.0,
                       replicas=60),
}


def default_config(kind: str, **overrides) -> ExperimentConfig:
    """Per-kind defaults, then explicit overrides."""
    params = dict(_KIND_DEFAULTS.get(kind, {}))
    params.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(kind=kind, **params)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file (flags override keys)")
    p.add_argument("--dim", type=int)
    p.add_argument("--n", dest="n_per_side", type=int)
    p.add_argument("--length", dest="side_length", type=float)
    p.add_argument("--cov-family", dest="cov_family",
                   choices=("gaussian_kernel", "exponential_kernel", "spherical_cutoff"))
    p.add_argument("--amplitude", type=float)
    p.add_argument("--corr-length", dest="corr_length", type=float)
    p.add_argument("--trunc-M", dest="trunc_M", type=float)
    p.add_argument("--no-trunc", action="store_true", help="disable coefficient truncation")
    p.add_argument("--tol", type=float)
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", dest="master_seed", type=int)
    p.add_argument("--out", dest="out_dir", type=str)
    p.add_argument("--threads", type=int)
    p.add_argument("--save-fields", dest="save_fields", action="store_true", default=None)
    p.add_argument("--eps-levels", dest="eps_levels", type=str,
                   help="comma separated dyadic scale ratios")
    p.add_argument("--R-list", dest="R_list", type=str,
                   help="comma separated averaging radii")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loghom",
        description="Monte Carlo experiments for log-normal coefficient homogenization",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        _add_common_flags(p)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for key in ("dim", "n_per_side", "side_length", "cov_family", "amplitude",
                "corr_length", "trunc_M", "tol", "replicas", "master_seed",
                "out_dir", "threads", "save_fields"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for key in ("eps_levels", "R_list"):
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = tuple(float(s) for s in raw.split(",") if s.strip())
    if args.config is not None:
        text = Path(args.config).read_text(encoding="utf-8")
        base = ExperimentConfig.from_ini(text, kind=args.kind)
        merged = {**{k: v for k, v in base.__dict__.items()}, **overrides}
        config = ExperimentConfig(**merged)
    else:
        config = default_config(args.kind, **overrides)
    if getattr(args, "no_trunc", False):
        from dataclasses import replace

        config = replace(config, trunc_M=None)
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        records, summary = run_experiment(config)
    except ExperimentFailure as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except LoghomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
