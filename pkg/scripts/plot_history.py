"""Plot train-loss curves from one or more ``t2lc train --out`` CSV files.

Requires the ``plot`` extra (matplotlib).  Usage:

    python3 scripts/plot_history.py gc.csv gc2l.csv -o loss.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from twolevel_gc.cli import read_csv  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("histories", nargs="+", help="history CSV files")
    ap.add_argument("--metric", default="train_loss", help="column to plot (default train_loss)")
    ap.add_argument("-o", "--output", default="history.png")
    args = ap.parse_args(argv)

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.histories:
        _, fields, rows = read_csv(path)
        if args.metric not in fields:
            ap.error(f"{path} has no column {args.metric!r}")
        ep, col = fields.index("epoch"), fields.index(args.metric)
        ax.plot([r[ep] for r in rows], [r[col] for r in rows], label=Path(path).stem)
    ax.set_xlabel("epoch")
    ax.set_ylabel(args.metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
