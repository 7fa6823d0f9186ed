#!/usr/bin/env python3
"""Figure scripts for the hopper experiment CSV logs.

Reads only the documented CSV schemas (hop logs, training logs, LQR scatter
tables, per-leg waypoint stats) and writes static images.  Inputs are never
mutated; rendering is deterministic for identical input bytes.

Kinds:
  overhead-trajectory   hop log -> overhead (x, y) path, optional waypoint square
  decay-curves          hop log -> per-hop error/state norms with fitted envelopes
  loss-curve            training log -> loss (and gradient norm, if present)
  policy-vs-lqr-scatter lqr scatter table -> policy command vs LQR command
  velocity-bands        hop log -> velocity error traces, optional per-leg bands

Usage: plot.py <kind> --in data.csv [--waypoints wp.csv] [--legs legs.csv]
               --out figure.png [--dpi 150] [--title text]
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class SchemaError(ValueError):
    """Input CSV does not match the documented schema."""


@dataclass
class PlotSpec:
    kind: str
    input_path: str
    output_path: str
    waypoints_path: str = None
    legs_path: str = None
    dpi: int = 150
    title: str = None


def read_columns(path) -> dict:
    """CSV -> {column: float array}; empty data sections are fine."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row")
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name.strip()] = np.array([float(row[j]) for row in rows])
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"{path}: column '{name.strip()}' is not numeric: {exc}")
    return cols


def require(cols: dict, names, path: str) -> None:
    for name in names:
        if name not in cols:
            raise SchemaError(f"{path}: missing required column '{name}'")


def optional(cols: dict, name: str, path: str):
    if name not in cols:
        warnings.warn(f"{path}: optional column '{name}' missing, skipping that series")
        return None
    return cols[name]


def _fit_envelope(norms: np.ndarray):
    """(M, lam) least-squares decay envelope in log space; None if degenerate."""
    mask = norms > 0
    if mask.sum() < 2:
        return None
    k = np.flatnonzero(mask).astype(float)
    slope, intercept = np.polyfit(k, np.log(norms[mask]), 1)
    lam = min(1.0, float(np.exp(slope)))
    kk = np.arange(norms.shape[0], dtype=float)
    env = lam ** kk
    M = max(float(np.exp(intercept)), float(np.max(norms[mask] / env[mask])))
    return M, lam


def render_overhead(spec: PlotSpec, ax) -> None:
    cols = read_columns(spec.input_path)
    require(cols, ("k", "z1", "z2"), spec.input_path)
    x, y = cols["z1"], cols["z2"]
    if x.size:
        ax.plot(x, y, "-o", ms=3, lw=1, color="tab:blue", label="hops")
        ax.plot(x[0], y[0], "s", color="tab:green", label="start")
        ax.plot(x[-1], y[-1], "*", ms=10, color="tab:red", label="end")
    if spec.waypoints_path:
        wp = read_columns(spec.waypoints_path)
        require(wp, ("px", "py"), spec.waypoints_path)
        px = np.append(wp["px"], wp["px"][:1])
        py = np.append(wp["py"], wp["py"][:1])
        ax.plot(px, py, "--", color="0.4", lw=1, label="reference")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    if x.size or spec.waypoints_path:
        ax.legend(loc="best", fontsize=8)


def render_decay(spec: PlotSpec, ax) -> None:
    cols = read_columns(spec.input_path)
    require(cols, ("k", "e1", "e2", "e3", "e4", "z1", "z2", "z3", "z4"),
            spec.input_path)
    k = cols["k"]
    if not k.size:
        ax.set_xlabel("hop")
        return
    e = np.linalg.norm(np.stack([cols[f"e{i}"] for i in range(1, 5)]), axis=0)
    z = np.linalg.norm(np.stack([cols[f"z{i}"] for i in range(1, 5)]), axis=0)
    for series, label, color in ((e, "|e_k|", "tab:orange"), (z, "|z_k|", "tab:blue")):
        ax.semilogy(k, np.maximum(series, 1e-16), "-o", ms=3, lw=1,
                    color=color, label=label)
        fit = _fit_envelope(series)
        if fit is not None:
            M, lam = fit
            ax.semilogy(k, np.maximum(M * lam ** k, 1e-16), "--", lw=1, color=color,
                        label=f"{label} envelope (lam={lam:.2f})")
    ax.set_xlabel("hop")
    ax.set_ylabel("norm")
    ax.legend(loc="best", fontsize=8)


def render_loss(spec: PlotSpec, ax) -> None:
    cols = read_columns(spec.input_path)
    require(cols, ("step", "loss"), spec.input_path)
    if cols["step"].size:
        ax.semilogy(cols["step"], np.maximum(cols["loss"], 1e-16), lw=1,
                    color="tab:blue", label="loss")
        grad = optional(cols, "grad_norm", spec.input_path)
        if grad is not None:
            ax2 = ax.twinx()
            ax2.semilogy(cols["step"], np.maximum(grad, 1e-16), lw=0.8,
                         color="tab:orange", alpha=0.7, label="grad norm")
            ax2.set_ylabel("gradient norm")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("invariance loss")


def render_lqr_scatter(spec: PlotSpec, ax) -> None:
    cols = read_columns(spec.input_path)
    require(cols, ("vlqr1", "vlqr2", "psi1", "psi2"), spec.input_path)
    if cols["vlqr1"].size:
        ax.scatter(cols["vlqr1"], cols["psi1"], s=8, alpha=0.6,
                   color="tab:blue", label="lean x")
        ax.scatter(cols["vlqr2"], cols["psi2"], s=8, alpha=0.6,
                   color="tab:orange", label="lean y")
        lim = 1.1 * max(np.abs(np.concatenate([cols["vlqr1"], cols["vlqr2"],
                                               cols["psi1"], cols["psi2"]])).max(), 1e-6)
        ax.plot([-lim, lim], [-lim, lim], "--", color="0.4", lw=1, label="agreement")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("LQR command [rad]")
    ax.set_ylabel("policy command [rad]")


def render_velocity_bands(spec: PlotSpec, ax) -> None:
    cols = read_columns(spec.input_path)
    require(cols, ("k", "z3", "z4"), spec.input_path)
    k = cols["k"]
    if k.size:
        ax.plot(k, cols["z3"], lw=1, color="tab:blue", label="xdot")
        ax.plot(k, cols["z4"], lw=1, color="tab:orange", label="ydot")
    if spec.legs_path:
        legs = read_columns(spec.legs_path)
        require(legs, ("leg",), spec.legs_path)
        mean_x = optional(legs, "verr_mean_x", spec.legs_path)
        band_x = optional(legs, "verr_2sigma_x", spec.legs_path)
        if mean_x is not None and band_x is not None and k.size:
            n_legs = legs["leg"].shape[0]
            hops_per_leg = max(1, k.size // max(1, n_legs))
            for i in range(n_legs):
                lo = i * hops_per_leg
                hi = min(k.size - 1, lo + hops_per_leg)
                ax.fill_between([k[lo], k[hi]],
                                mean_x[i] - band_x[i], mean_x[i] + band_x[i],
                                color="tab:blue", alpha=0.15)
    if k.size:
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("hop")
    ax.set_ylabel("velocity [m/s]")


KINDS = {
    "overhead-trajectory": render_overhead,
    "decay-curves": render_decay,
    "loss-curve": render_loss,
    "policy-vs-lqr-scatter": render_lqr_scatter,
    "velocity-bands": render_velocity_bands,
}


def render(spec: PlotSpec) -> None:
    """Render one figure; raises SchemaError on malformed input."""
    if spec.kind not in KINDS:
        raise SchemaError(f"unknown plot kind {spec.kind!r}")
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    try:
        KINDS[spec.kind](spec, ax)
        if spec.title:
            ax.set_title(spec.title)
        fig.tight_layout()
        fig.savefig(spec.output_path, dpi=spec.dpi)
    finally:
        plt.close(fig)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=sorted(KINDS))
    ap.add_argument("--in", dest="input_path", required=True)
    ap.add_argument("--out", dest="output_path", required=True)
    ap.add_argument("--waypoints")
    ap.add_argument("--legs")
    ap.add_argument("--dpi", type=int, default=150)
    ap.add_argument("--title")
    args = ap.parse_args(argv)
    spec = PlotSpec(kind=args.kind, input_path=args.input_path,
                    output_path=args.output_path, waypoints_path=args.waypoints,
                    legs_path=args.legs, dpi=args.dpi, title=args.title)
    try:
        render(spec)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {spec.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
