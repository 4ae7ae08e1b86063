"""Matplotlib renderings of the standard analysis products.

Every function saves a PNG next to the delimited output and returns the
path. Rendering is headless (Agg); nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .analysis import CorrelationResult, Histogram, WindowSpec  # noqa: E402
from .model import EfficiencyCurve, NoiseLine, stage_efficiency, noise_rate  # noqa: E402

__all__ = [
    "save_histogram_figure",
    "save_shapes_figure",
    "save_g2_figure",
    "save_efficiency_figure",
    "save_noise_figure",
    "save_sweep_figure",
]

_CHANNEL_NAMES = {1: "visible", 2: "telecom"}


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_histogram_figure(hists: list[Histogram], path: str | Path,
                          windows: dict[int, tuple[WindowSpec, WindowSpec]] | None = None
                          ) -> Path:
    """Trigger-relative arrival histograms with the counting windows marked."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for hist in hists:
        label = _CHANNEL_NAMES.get(hist.channel, f"channel {hist.channel}")
        ax.stairs(hist.counts, hist.edges_ns, label=label)
        if windows and hist.channel in windows:
            signal, noise = windows[hist.channel]
            ax.axvspan(signal.start_ns, signal.end_ns, alpha=0.15, color="tab:green")
            ax.axvspan(noise.start_ns, noise.end_ns, alpha=0.15, color="tab:red")
    ax.set_xlabel("time after trigger (ns)")
    ax.set_ylabel("counts per bin")
    if any(hist.total > 0 for hist in hists):  # log scale needs a positive value
        ax.set_yscale("log")
    ax.legend()
    return _finish(fig, path)


def save_shapes_figure(edges_ns: np.ndarray, shapes: dict[str, np.ndarray],
                       path: str | Path) -> Path:
    """Background-subtracted, unit-area pulse shapes overlaid."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, shape in shapes.items():
        ax.stairs(shape, edges_ns, label=label)
    ax.set_xlabel("time after trigger (ns)")
    ax.set_ylabel("normalized counts")
    ax.legend()
    return _finish(fig, path)


def save_g2_figure(result: CorrelationResult, path: str | Path) -> Path:
    """Cross correlation versus shift, with error bars."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.errorbar(result.n_values, result.g2, yerr=result.sigma,
                fmt="o", markersize=3, linewidth=1)
    ax.axhline(1.0, color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlabel("shift (cycles)")
    ax.set_ylabel("g2")
    return _finish(fig, path)


def save_efficiency_figure(points, curve: EfficiencyCurve, path: str | Path) -> Path:
    """Measured efficiency points with the fitted pump-power law."""
    pts = np.asarray([(row[0], row[1]) for row in points], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(pts[:, 0], pts[:, 1], "o", label="measured")
    grid = np.linspace(0.0, max(pts[:, 0].max(), curve.pm_mw) * 1.1, 300)
    ax.plot(grid, [stage_efficiency(p, curve) for p in grid], "-",
            label=f"fit: eta0={curve.eta0:.3f}, pm={curve.pm_mw:.0f} mW")
    ax.set_xlabel("pump power (mW)")
    ax.set_ylabel("conversion efficiency")
    ax.legend()
    return _finish(fig, path)


def save_noise_figure(points, slope_hz_per_mw: float, intercept_hz: float,
                      path: str | Path) -> Path:
    """Measured noise rates with the fitted line."""
    pts = np.asarray([(row[0], row[1]) for row in points], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(pts[:, 0], pts[:, 1], "o", label="measured")
    grid = np.linspace(0.0, pts[:, 0].max() * 1.1, 50)
    ax.plot(grid, slope_hz_per_mw * grid + intercept_hz, "-",
            label=f"fit: {slope_hz_per_mw:.4f} Hz/mW + {intercept_hz:.1f} Hz")
    ax.set_xlabel("pump power (mW)")
    ax.set_ylabel("noise rate (Hz)")
    ax.legend()
    return _finish(fig, path)


def save_sweep_figure(powers_mw: np.ndarray, efficiencies: np.ndarray,
                      noise_hz: np.ndarray, path: str | Path) -> Path:
    """Model efficiency and noise across a pump-power grid."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(powers_mw, efficiencies, "-", color="tab:blue")
    ax.set_xlabel("pump power (mW)")
    ax.set_ylabel("stage efficiency", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(powers_mw, noise_hz, "-", color="tab:red")
    ax2.set_ylabel("pump-induced noise (Hz)", color="tab:red")
    return _finish(fig, path)
