"""Plot the mean and histogram of an ``ensemble.csv`` written by ``stochcasimir simulate``.

Usage::

    python scripts/plot_ensemble.py out/ensemble.csv --observable Pi1 -o ensemble.png

Needs the ``plot`` extra (matplotlib).
"""
import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", type=Path)
    ap.add_argument("--observable", default="Pi1")
    ap.add_argument("-o", "--output", type=Path, default=Path("ensemble.png"))
    args = ap.parse_args(argv)

    header = args.csv.read_text().splitlines()[0].split(",")
    data = np.loadtxt(args.csv, delimiter=",", skiprows=1, ndmin=2)
    meta_path = args.csv.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    t = data[:, header.index("t")]
    mean = data[:, header.index(f"mean_{args.observable}")]
    sd = np.sqrt(data[:, header.index(f"var_{args.observable}")])

    bins = [i for i, c in enumerate(header) if c.startswith("hist_") and c[5:].isdigit()]
    fig, axes = plt.subplots(1, 2 if bins else 1, figsize=(11 if bins else 6, 4), squeeze=False)
    ax = axes[0, 0]
    ax.plot(t, mean, lw=1.2, label="mean")
    ax.fill_between(t, mean - sd, mean + sd, alpha=0.3, label="±1 sd")
    if meta.get("T_max") is not None:
        ax.axvline(meta["T_max"], color="k", ls="--", lw=0.8, label="T_max")
    ax.set_xlabel("t")
    ax.set_ylabel(args.observable)
    ax.legend()
    if bins:
        counts = data[:, bins].T
        lo, hi = meta.get("histogram", {}).get("range", (-1.0, 1.0))
        im = axes[0, 1].imshow(np.log1p(counts), aspect="auto", origin="lower",
                               extent=(t[0], t[-1], lo, hi), cmap="viridis")
        axes[0, 1].set_xlabel("t")
        axes[0, 1].set_ylabel(f"{args.observable} histogram")
        fig.colorbar(im, ax=axes[0, 1], label="log(1 + count)")
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
