"""Plot slices written by `expfunc solve-pide` / `solve-cdf` / `solve-stationary`.

    python docs/plot_density.py out/solve-pide.csv [out/solve-stationary.csv]
"""
import sys

import matplotlib.pyplot as plt
import pandas as pd


def main(paths):
    fig, ax = plt.subplots()
    for path in paths:
        df = pd.read_csv(path, comment="#")
        if "p_inf" in df.columns:
            ax.plot(df["y"], df["p_inf"], "k--", label=f"{path}: stationary")
            continue
        value = "p" if "p" in df.columns else "F"
        for s, slice_ in df.groupby("s"):
            ax.plot(slice_["y"], slice_[value], label=f"{path}: s = {s:g}")
    ax.set_xscale("log")
    ax.set_xlabel("y")
    ax.legend()
    fig.savefig("density.png", dpi=150)


if __name__ == "__main__":
    main(sys.argv[1:])
