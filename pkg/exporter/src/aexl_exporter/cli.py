"""CLI: ``aexl-export export --adapter npz --data logits.npz --out file.aexl``.

Exit codes: 0 success, 1 usage error, 2 export/data error.
"""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aexl-export", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export")
    p.add_argument("--adapter", required=True,
                   help="registered adapter name or module:factory path")
    p.add_argument("--data", required=True, help="dataset/checkpoint path for the adapter")
    p.add_argument("--out", required=True, help="output .aexl path")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        adapter=args.adapter,
        data_path=args.data,
        out_path=args.out,
        batch_size=args.batch_size,
        device=args.device,
    )
    try:
        out = export(job)
    except (ExportError, FileNotFoundError, ValueError) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
