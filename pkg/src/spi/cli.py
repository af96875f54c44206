"""Command-line interface.

Exit status: 0 on success / checks passed, 1 when a verification check
fails, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import sys

from spi.expr import ExprError
from spi.graphs import DiagramLimitError, enumerate_diagrams
from spi.harness import CheckError, ConfigError, RunConfig, run

__all__ = ["main"]


def _build_parser():
    p = argparse.ArgumentParser(
        prog="spi",
        description="Semiclassical propagator series and structure checks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("diagrams", help="list diagram classes per loop order")
    d.add_argument("--max-order", type=int, default=1, metavar="N")
    d.add_argument("--marks", type=int, default=0, choices=(0, 1, 2))
    d.add_argument("--out", default=None)

    for name, hlp in (
        ("propagate", "assemble the series for a configured problem"),
        ("fubini", "composition-law check at the configured split time"),
        ("coords", "volume-preserving coordinate-invariance check"),
        ("stphase-oracle", "hbar-sweep ratio table for the expansion"),
    ):
        q = sub.add_parser(name, help=hlp)
        q.add_argument("--config", required=True)
        q.add_argument("--out", default=None)

    g = sub.add_parser("green", help="dump the Green's function on a grid as CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None)
    g.add_argument("--grid", type=int, default=None)
    g.add_argument("--dsigma", type=int, default=0, choices=(0, 1))
    g.add_argument("--dtau", type=int, default=0, choices=(0, 1))

    v = sub.add_parser("divergences", help="batch divergence report")
    v.add_argument("configs", nargs="+", metavar="CONFIG")
    v.add_argument("--out", default=None)
    return p


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "diagrams":
            lines = [
                g.dump()
                for g in enumerate_diagrams(args.max_order, args.marks)
            ]
            payload = ("\n".join(lines) + "\n") if lines else ""
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(payload)
            else:
                sys.stdout.write(payload)
            return 0
        if args.command == "divergences":
            configs = [RunConfig.load(path) for path in args.configs]
            code, payload = run(configs, "divergences", out=args.out)
        elif args.command == "green":
            config = RunConfig.load(args.config)
            code, payload = run(
                config,
                "green",
                out=args.out,
                grid=args.grid,
                dsigma=args.dsigma,
                dtau=args.dtau,
            )
        else:
            config = RunConfig.load(args.config)
            code, payload = run(config, args.command, out=args.out)
        if args.out is None:
            sys.stdout.write(payload.decode() if isinstance(payload, bytes) else payload)
        return code
    except (ConfigError, ExprError, DiagramLimitError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CheckError as err:
        print(f"check refused: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
