"""Closed-form physics of the photon conversion link.

Pump-power dependence of the conversion efficiency, pump-induced noise,
end-to-end cascade throughput, per-attempt window probabilities, and the
least-squares fitters that recover curve parameters from measured points.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

__all__ = [
    "FitError",
    "EfficiencyCurve",
    "NoiseLine",
    "LinearFit",
    "StageSpec",
    "CascadeSpec",
    "DetectorSpec",
    "SourceSpec",
    "stage_efficiency",
    "fit_efficiency_curve",
    "noise_rate",
    "fit_noise_line",
    "cascade_throughput",
    "window_capture_fraction",
    "channel_window_probability",
    "predicted_window_totals",
]

# Fraction of a channel's per-attempt noise budget above which the Poisson
# thinning used elsewhere stops being a good single-count approximation.
NOISE_PILEUP_WARN = 0.1


class FitError(RuntimeError):
    """A fit was requested on degenerate or underdetermined data."""


@dataclass(frozen=True)
class EfficiencyCurve:
    """Pump-power law of a difference-frequency conversion stage.

    Efficiency follows ``eta0 * sin^2((pi/2) * sqrt(P / pm_mw))``: it rises
    from zero, peaks at ``eta0`` when ``P == pm_mw``, and rolls over beyond.
    """

    eta0: float  # peak external conversion efficiency, fraction
    pm_mw: float  # pump power at the efficiency maximum, mW

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta0 <= 1.0:
            raise ValueError(f"eta0 must be in [0, 1], got {self.eta0}")
        if not self.pm_mw > 0.0:
            raise ValueError(f"pm_mw must be positive, got {self.pm_mw}")


@dataclass(frozen=True)
class NoiseLine:
    """Linear pump-power dependence of a detector noise rate."""

    slope_hz_per_mw: float  # pump-induced noise per unit pump power
    intercept_hz: float  # pump-independent floor (darks, leakage)

    def __post_init__(self) -> None:
        if self.slope_hz_per_mw < 0.0:
            raise ValueError(
                f"slope_hz_per_mw must be >= 0, got {self.slope_hz_per_mw}"
            )
        if self.intercept_hz < 0.0:
            raise ValueError(f"intercept_hz must be >= 0, got {self.intercept_hz}")


@dataclass(frozen=True)
class LinearFit:
    """Raw result of an ordinary least-squares line fit.

    Unlike NoiseLine this carries whatever the data gave, including
    unphysical negative coefficients; ``flagged`` marks those so callers can
    report the numbers as-is instead of silently clamping.
    """

    slope_hz_per_mw: float
    intercept_hz: float
    rms_hz: float  # root-mean-square residual of the fit
    flagged: bool  # True when slope or intercept came out negative

    def to_noise_line(self) -> NoiseLine:
        """Convert to a NoiseLine; refuses flagged (unphysical) fits."""
        if self.flagged:
            raise FitError(
                "fit produced negative coefficients "
                f"(slope={self.slope_hz_per_mw:.6g}, intercept={self.intercept_hz:.6g}); "
                "not a valid noise line"
            )
        return NoiseLine(self.slope_hz_per_mw, self.intercept_hz)


@dataclass(frozen=True)
class StageSpec:
    """One conversion stage: its efficiency curve and operating point."""

    label: str
    curve: EfficiencyCurve
    pump_mw: float  # operating pump power, mW
    noise: NoiseLine | None = None  # pump-induced noise seen downstream
    polarization_acceptance: str = "single"  # "single" or "both"
    # Spectral filter transmission after the stage, kept for reference only.
    # The curve's eta0 is an end-to-end figure that already includes this
    # factor, so throughput math must never multiply it in again.
    filter_transmission: float | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("stage label must be non-empty")
        if self.pump_mw < 0.0:
            raise ValueError(f"pump_mw must be >= 0, got {self.pump_mw}")
        if self.polarization_acceptance not in ("single", "both"):
            raise ValueError(
                "polarization_acceptance must be 'single' or 'both', "
                f"got {self.polarization_acceptance!r}"
            )
        if self.filter_transmission is not None and not (
            0.0 < self.filter_transmission <= 1.0
        ):
            raise ValueError(
                f"filter_transmission must be in (0, 1], got {self.filter_transmission}"
            )

    @property
    def efficiency(self) -> float:
        """Conversion efficiency at the operating pump power."""
        return stage_efficiency(self.pump_mw, self.curve)

    @property
    def noise_hz(self) -> float:
        """Pump-induced noise rate at the operating point (0 if no line)."""
        if self.noise is None:
            return 0.0
        return noise_rate(self.pump_mw, self.noise)


@dataclass(frozen=True)
class CascadeSpec:
    """A chain of conversion stages with the couplings between them."""

    stages: tuple[StageSpec, ...]
    interstage_coupling: float  # fiber/mode coupling between stages, fraction
    source_polarization_split: float  # fraction of emission in the accepted mode

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("cascade needs at least one stage")
        if not 0.0 < self.interstage_coupling <= 1.0:
            raise ValueError(
                f"interstage_coupling must be in (0, 1], got {self.interstage_coupling}"
            )
        if not 0.0 < self.source_polarization_split <= 1.0:
            raise ValueError(
                "source_polarization_split must be in (0, 1], "
                f"got {self.source_polarization_split}"
            )


@dataclass(frozen=True)
class DetectorSpec:
    """Single-photon detector figures used by the simulator."""

    label: str
    efficiency: float  # detection efficiency, fraction
    dark_hz: float  # intrinsic dark-count rate
    jitter_sigma_ps: float  # Gaussian timing jitter, 1-sigma

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("detector label must be non-empty")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if self.dark_hz < 0.0:
            raise ValueError(f"dark_hz must be >= 0, got {self.dark_hz}")
        if self.jitter_sigma_ps < 0.0:
            raise ValueError(
                f"jitter_sigma_ps must be >= 0, got {self.jitter_sigma_ps}"
            )


@dataclass(frozen=True)
class SourceSpec:
    """Per-attempt emission model of the single-photon source.

    ``p_visible_window`` and ``p_telecom_window`` are the probabilities that
    an excitation attempt produces a detected click *inside the reference
    signal window* on the respective channel, after all optical losses and
    detector efficiencies. They are end-to-end numbers taken straight from
    measured count rates, which is why the simulator converts them back to
    whole-decay probabilities via the window capture fraction before drawing.
    """

    tau_ns: float  # exponential decay constant of the emission
    p_visible_window: float  # per-attempt in-window click probability, visible arm
    p_telecom_window: float  # same for the converted telecom arm
    reference_window_ns: float = 41.6  # window the in-window probabilities refer to

    def __post_init__(self) -> None:
        if not self.tau_ns > 0.0:
            raise ValueError(f"tau_ns must be positive, got {self.tau_ns}")
        if not self.reference_window_ns > 0.0:
            raise ValueError(
                f"reference_window_ns must be positive, got {self.reference_window_ns}"
            )
        for name in ("p_visible_window", "p_telecom_window"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.p_visible_total + self.p_telecom_total > 1.0:
            raise ValueError(
                "window probabilities exceed the capture fraction; the implied "
                "per-attempt click probabilities sum above 1"
            )

    @property
    def capture_fraction(self) -> float:
        """Fraction of the exponential decay inside the reference window."""
        return window_capture_fraction(self.reference_window_ns, self.tau_ns)

    @property
    def p_visible_total(self) -> float:
        """Per-attempt probability of a visible click anywhere in the decay."""
        return self.p_visible_window / self.capture_fraction

    @property
    def p_telecom_total(self) -> float:
        """Per-attempt probability of a telecom click anywhere in the decay."""
        return self.p_telecom_window / self.capture_fraction

    def p_window(self, channel: str) -> float:
        """In-window click probability for ``channel`` of 'visible'/'telecom'."""
        if channel == "visible":
            return self.p_visible_window
        if channel == "telecom":
            return self.p_telecom_window
        raise ValueError(f"channel must be 'visible' or 'telecom', got {channel!r}")


def stage_efficiency(p_mw: float, curve: EfficiencyCurve) -> float:
    """Conversion efficiency of a stage at pump power ``p_mw``.

    Zero pump gives zero efficiency; the curve peaks at ``curve.pm_mw`` and
    rolls over (over-conversion) beyond it. Negative pump power is a domain
    error.
    """
    if p_mw < 0.0:
        raise ValueError(f"pump power must be >= 0, got {p_mw}")
    theta = 0.5 * math.pi * math.sqrt(p_mw / curve.pm_mw)
    return curve.eta0 * math.sin(theta) ** 2


def _sin2_law(p: np.ndarray, eta0: float, pm_mw: float) -> np.ndarray:
    return eta0 * np.sin(0.5 * np.pi * np.sqrt(p / pm_mw)) ** 2


def _as_points(points, n_min: int, what: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize an iterable of (x, y[, sigma]) rows into three arrays."""
    rows = [tuple(float(v) for v in row) for row in points]
    if len(rows) < n_min:
        raise FitError(f"{what} needs at least {n_min} points, got {len(rows)}")
    if any(len(r) not in (2, 3) for r in rows):
        raise FitError(f"{what} rows must be (x, y) or (x, y, sigma)")
    x = np.array([r[0] for r in rows], dtype=float)
    y = np.array([r[1] for r in rows], dtype=float)
    sig = np.array([r[2] if len(r) == 3 else 1.0 for r in rows], dtype=float)
    if np.any(x < 0.0):
        raise FitError(f"{what} pump powers must be >= 0")
    if len(np.unique(x)) != len(x):
        raise FitError(f"{what} pump powers must be distinct")
    if np.any(sig <= 0.0):
        raise FitError(f"{what} sigmas must be positive")
    return x, y, sig


def fit_efficiency_curve(points) -> tuple[EfficiencyCurve, float]:
    """Fit the sin^2 pump-power law to measured (pump_mw, efficiency) points.

    Damped least squares started from several pm guesses (half, at, and
    twice the largest measured power) so the fit cannot latch onto the wrong
    side of the efficiency maximum when the data stop short of it. Points may
    carry an optional per-point sigma as a third column.

    Returns the fitted curve and the weighted RMS misfit.
    """
    p, y, sig = _as_points(points, 3, "efficiency fit")
    if np.all(y == 0.0):
        raise FitError("efficiency fit needs at least one nonzero point")
    if np.any((y < 0.0) | (y > 1.0)):
        raise FitError("efficiencies must be in [0, 1]")

    pmax = float(p.max())
    if pmax == 0.0:
        raise FitError("efficiency fit needs a nonzero pump power")
    eta0_start = min(max(float(y.max()), 1e-3), 1.0)

    def residuals(theta: np.ndarray) -> np.ndarray:
        return (_sin2_law(p, theta[0], theta[1]) - y) / sig

    best = None
    for pm_start in (0.5 * pmax, pmax, 2.0 * pmax):
        try:
            res = least_squares(
                residuals,
                x0=[eta0_start, pm_start],
                bounds=([0.0, 1e-9], [1.0, np.inf]),
                method="trf",
            )
        except Exception as exc:  # pragma: no cover - scipy internal failure
            raise FitError(f"efficiency fit failed: {exc}") from exc
        if best is None or res.cost < best.cost:
            best = res
    assert best is not None
    eta0, pm_mw = float(best.x[0]), float(best.x[1])
    rms = float(np.sqrt(np.mean(residuals(best.x) ** 2)))
    return EfficiencyCurve(eta0=eta0, pm_mw=pm_mw), rms


def noise_rate(p_mw: float, line: NoiseLine) -> float:
    """Noise rate at pump power ``p_mw`` on a linear pump dependence."""
    if p_mw < 0.0:
        raise ValueError(f"pump power must be >= 0, got {p_mw}")
    return line.slope_hz_per_mw * p_mw + line.intercept_hz


def fit_noise_line(points) -> LinearFit:
    """Ordinary least-squares line through (pump_mw, rate_hz) points.

    Negative fitted coefficients are reported as-is but flagged; use
    ``LinearFit.to_noise_line`` when a physical NoiseLine is required.
    An optional third sigma column is accepted and ignored (the fit is
    deliberately unweighted).
    """
    x, y, _ = _as_points(points, 2, "noise fit")
    if np.all(x == x[0]):
        raise FitError("noise fit needs at least two distinct pump powers")
    slope, intercept = np.polyfit(x, y, 1)
    rms = float(np.sqrt(np.mean((np.polyval([slope, intercept], x) - y) ** 2)))
    flagged = bool(slope < 0.0 or intercept < 0.0)
    return LinearFit(
        slope_hz_per_mw=float(slope),
        intercept_hz=float(intercept),
        rms_hz=rms,
        flagged=flagged,
    )


def cascade_throughput(cascade: CascadeSpec, include_polarization: bool = False) -> float:
    """End-to-end conversion probability of the cascade.

    Product of each stage's efficiency at its operating point and the
    interstage coupling. With ``include_polarization`` the source's
    polarization split is folded in as well, giving the probability for an
    emitted (rather than collected-mode) photon.
    """
    eff = 1.0
    for stage in cascade.stages:
        eff *= stage.efficiency
    eff *= cascade.interstage_coupling
    if include_polarization:
        eff *= cascade.source_polarization_split
    if not 0.0 <= eff <= 1.0:  # pragma: no cover - field validators keep this true
        raise ValueError(f"cascade throughput {eff} outside [0, 1]")
    return eff


def window_capture_fraction(window_ns: float, tau_ns: float) -> float:
    """Fraction of an exponential decay falling inside [0, window_ns)."""
    if window_ns <= 0.0:
        raise ValueError(f"window_ns must be positive, got {window_ns}")
    if tau_ns <= 0.0:
        raise ValueError(f"tau_ns must be positive, got {tau_ns}")
    return 1.0 - math.exp(-window_ns / tau_ns)


def channel_window_probability(
    source: SourceSpec, channel: str, noise_hz: float, window_ns: float
) -> tuple[float, float]:
    """Per-attempt signal and noise probabilities for a counting window.

    The signal term is the source's in-window click probability rescaled
    from its reference window to ``window_ns`` (both anchored at the start of
    the decay). The noise term is ``noise_hz * window_ns`` assuming at most
    one noise count per window; a warning is emitted when that thinning
    approximation starts to break down.
    """
    if noise_hz < 0.0:
        raise ValueError(f"noise_hz must be >= 0, got {noise_hz}")
    capture = window_capture_fraction(window_ns, source.tau_ns)
    p_signal = source.p_window(channel) * capture / source.capture_fraction
    p_noise = noise_hz * window_ns * 1e-9
    if p_noise >= NOISE_PILEUP_WARN:
        warnings.warn(
            f"per-window noise probability {p_noise:.3g} >= {NOISE_PILEUP_WARN}; "
            "single-count approximation is breaking down",
            stacklevel=2,
        )
    return p_signal, p_noise


def predicted_window_totals(
    source: SourceSpec,
    channel: str,
    noise_hz: float,
    attempts: int,
    window_start_ns: float,
    window_width_ns: float,
) -> tuple[float, float]:
    """Expected raw window totals (signal+noise, noise) for a counting window.

    ``window_start_ns`` is measured from the start of the decay, so a window
    that starts before the excitation simply collects nothing extra. Used to
    cross-check simulated runs against the closed-form model.
    """
    if window_width_ns <= 0.0:
        raise ValueError(f"window_width_ns must be positive, got {window_width_ns}")
    if noise_hz < 0.0:
        raise ValueError(f"noise_hz must be >= 0, got {noise_hz}")
    if attempts < 0:
        raise ValueError(f"attempts must be >= 0, got {attempts}")
    lo = max(window_start_ns, 0.0)
    hi = max(window_start_ns + window_width_ns, 0.0)
    capture = math.exp(-lo / source.tau_ns) - math.exp(-hi / source.tau_ns)
    p_total = source.p_window(channel) / source.capture_fraction
    signal = attempts * p_total * capture
    noise = attempts * noise_hz * window_width_ns * 1e-9
    return signal + noise, noise
