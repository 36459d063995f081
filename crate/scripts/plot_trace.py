"""Plot a simulate or decouple-demo output directory.

    python scripts/plot_trace.py out/formation8 [--save fig.png]
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_trace(out: Path, ax):
    df = pd.read_csv(out / "trace.csv")
    summary = json.loads((out / "summary.json").read_text())
    ax[0].semilogy(df["t"], df["delta_norm"].clip(lower=1e-12))
    ax[0].set_ylabel("|delta|")
    for sw in summary.get("switches", []):
        ax[0].axvline(sw["t"], color="grey", ls=":")
    ax[1].plot(df["t"], df["lhs_running"], label="lhs")
    ax[1].plot(df["t"], df["rhs_running"], label="rhs")
    ax[1].set_ylabel("certificate")
    ax[1].legend()
    est = summary.get("estimator")
    if est:
        ax[0].axvline(est["t_star"], color="red", ls="--", label="t*")
    px = [c for c in df.columns if c.startswith("x[") and c.endswith("][1]")]
    py = [c.replace("][1]", "][2]") for c in px]
    for a, b in zip(px, py):
        ax[2].plot(df[a], df[b], lw=0.8)
    ax[2].set_aspect("equal", adjustable="datalim")
    ax[2].set_xlabel("p_x")
    ax[2].set_ylabel("p_y")


def plot_estimator(out: Path, ax):
    df = pd.read_csv(out / "estimator.csv")
    summary = json.loads((out / "summary.json").read_text())
    for c in [c for c in df.columns if c.startswith("err[")]:
        ax[0].semilogy(df["t"], df[c].clip(lower=1e-16), label=c)
    ax[0].axhline(summary["chatter_band"], color="grey", ls=":")
    ax[0].axvline(summary["t_star"], color="red", ls="--")
    ax[0].legend(fontsize="small")
    ax[1].plot(df["t"], df["vtilde_norm"])
    ax[1].set_ylabel("|v~|")
    for c in [c for c in df.columns if c.startswith(("u_hat", "w_hat"))]:
        ax[2].plot(df["t"], df[c], label=c)
    ax[2].legend(fontsize="small")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("out", type=Path)
    p.add_argument("--save", type=Path)
    args = p.parse_args()
    fig, ax = plt.subplots(3, 1, figsize=(8, 10))
    if (args.out / "trace.csv").exists():
        plot_trace(args.out, ax)
    else:
        plot_estimator(args.out, ax)
    fig.tight_layout()
    fig.savefig(args.save or args.out / "plot.png", dpi=120)


if __name__ == "__main__":
    main()
