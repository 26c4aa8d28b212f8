"""Command-line entry point: one subcommand per study kind.

Flags override config keys (flag > file > default).  Exit codes: 0 when the
run passed, 1 when an asserted invariant failed or a module raised, 2 when
the config could not be loaded.
"""

from __future__ import annotations

import argparse
import sys

from .config import STUDY_KINDS, ConfigError, load_config
from .harness import run_study

_DESCRIPTIONS = {
    "pde-solve": "integrate the mean-field equation and dump snapshots",
    "particles-run": "run the interacting-particle ensemble and pool marginals",
    "liouville-run": "solve an exact small-N joint law and audit its entropy",
    "chaos-study": "fit the marginal error against a ladder of particle counts",
    "verify-inequalities": "exhaustively exercise the entropy inequalities",
    "bench-forces": "time the naive and spectral force evaluators",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaoslab",
        description="desk-scale workbench for interacting-particle diffusions on the torus",
    )
    sub = parser.add_subparsers(dest="study", required=True, metavar="<study>")
    for kind in STUDY_KINDS:
        p = sub.add_parser(kind, help=_DESCRIPTIONS[kind])
        p.add_argument("--config", required=True, help="TOML study configuration")
        p.add_argument("--seed", type=int, default=None, help="override the master seed (u64)")
        p.add_argument("--out", default=None, help="output directory for artifacts")
        p.add_argument("--workers", type=int, default=None,
                       help="scheduling hint; outputs are identical for any value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            kind=args.study,
            overrides={"seed": args.seed, "out_dir": args.out, "workers": args.workers},
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = run_study(cfg)
    for name in sorted(manifest.artifacts):
        print(f"wrote {name}  sha256={manifest.artifacts[name][:12]}")
    if manifest.status == "pass":
        print(f"{cfg.kind}: pass")
    else:
        print(f"{cfg.kind}: FAIL ({manifest.failure})", file=sys.stderr)
    return manifest.exit_code()


if __name__ == "__main__":
    sys.exit(main())
