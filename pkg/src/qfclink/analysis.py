"""Estimators over time-tag streams.

Everything here works on trigger-relative arrival times: each non-trigger
tag is attributed to the most recent prior channel-0 trigger, in a single
pass over the stream. The reduced per-tag table (channel, owning attempt,
relative ticks) is small compared to the raw stream, so all downstream
estimators (histograms, window counts, signal-to-background, cross
correlations, pulse shapes) reuse one collection pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sequencer import Channel, StreamHeader, TagStream

__all__ = [
    "DegenerateShapeError",
    "WindowSpec",
    "Histogram",
    "SbrResult",
    "CountSummary",
    "CorrelationResult",
    "CollectedRun",
    "collect_stream",
    "build_histogram",
    "window_counts",
    "sbr",
    "expected_g2_zero",
    "g2_cross",
    "background_subtract_normalize",
    "shape_overlap",
    "optimize_window",
    "place_signal_window",
    "noise_window_for",
]


class DegenerateShapeError(ValueError):
    """Background subtraction left nothing to normalize."""


@dataclass(frozen=True)
class WindowSpec:
    """Half-open counting window [start, start+width) in trigger-relative ns."""

    start_ns: float
    width_ns: float

    def __post_init__(self) -> None:
        if self.width_ns <= 0.0:
            raise ValueError(f"width_ns must be positive, got {self.width_ns}")

    @property
    def end_ns(self) -> float:
        return self.start_ns + self.width_ns

    def tick_range(self, tick_ps: int) -> tuple[int, int]:
        """Window edges on the tick grid, rounded half up."""
        per_ns = 1000.0 / tick_ps
        lo = math.floor(self.start_ns * per_ns + 0.5)
        hi = math.floor(self.end_ns * per_ns + 0.5)
        return lo, hi


# Nudge applied before flooring a bin index. Arrival times are integer ticks,
# so a true bin ratio is rational with spacing far above this; the nudge only
# rescues values that land an ulp below an exact bin edge.
_EDGE_EPS = 1e-9


@dataclass
class Histogram:
    """Counts of trigger-relative arrival times on a uniform grid."""

    channel: int
    bin_ns: float
    origin_ns: float
    counts: np.ndarray  # int64 per-bin counts
    attempts: int  # triggers seen in the underlying stream
    orphans: int  # tags before the first trigger, excluded from bins
    tick_ps: int

    @property
    def nbins(self) -> int:
        return len(self.counts)

    @property
    def edges_ns(self) -> np.ndarray:
        return self.origin_ns + self.bin_ns * np.arange(self.nbins + 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class SbrResult:
    """Signal-to-background ratio with its propagated uncertainty."""

    value: float
    sigma: float
    window_total: float  # raw counts in the signal window (T)
    noise_total: float  # counts in the equal-width noise window (N)


@dataclass(frozen=True)
class CountSummary:
    """Window totals of one run in the convention of the correlation math.

    Channel 1 here is the telecom arm and channel 2 the visible arm;
    ``*_signal`` are background-subtracted window counts and ``*_noise`` the
    matching noise-window counts.
    """

    telecom_signal: float
    telecom_noise: float
    visible_signal: float
    visible_noise: float
    attempts: float

    def __post_init__(self) -> None:
        for name in ("telecom_signal", "telecom_noise", "visible_signal",
                     "visible_noise"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.attempts <= 0.0:
            raise ValueError(f"attempts must be positive, got {self.attempts}")

    @classmethod
    def from_window_totals(cls, telecom_total: float, telecom_noise: float,
                           visible_total: float, visible_noise: float,
                           attempts: float) -> CountSummary:
        """Build from raw window totals, subtracting the noise windows."""
        return cls(
            telecom_signal=max(telecom_total - telecom_noise, 0.0),
            telecom_noise=telecom_noise,
            visible_signal=max(visible_total - visible_noise, 0.0),
            visible_noise=visible_noise,
            attempts=attempts,
        )

    @property
    def telecom_total(self) -> float:
        return self.telecom_signal + self.telecom_noise

    @property
    def visible_total(self) -> float:
        return self.visible_signal + self.visible_noise


@dataclass(frozen=True)
class CorrelationResult:
    """Cross correlation of windowed hits versus attempt shift."""

    n_values: np.ndarray  # shift in units of attempts_per_shift
    g2: np.ndarray  # normalized coincidence rate per shift
    sigma: np.ndarray  # Poisson uncertainty of each g2 value
    coincidences: np.ndarray  # raw pair counts per shift
    hits_1: int  # windowed hit attempts, first channel
    hits_2: int  # windowed hit attempts, second channel
    attempts: int
    attempts_per_shift: int

    def zero_shift(self) -> tuple[float, float]:
        """(g2, sigma) at zero shift."""
        i = int(np.nonzero(self.n_values == 0)[0][0])
        return float(self.g2[i]), float(self.sigma[i])

    def offpeak_mean(self) -> float:
        """Mean g2 over all nonzero shifts."""
        mask = self.n_values != 0
        return float(self.g2[mask].mean())


@dataclass
class CollectedRun:
    """Reduced per-tag table from one pass over a stream."""

    attempts: int
    tick_ps: int
    orphans: int
    channel: np.ndarray  # u1, non-trigger tags only
    attempt_index: np.ndarray  # i8, owning trigger's attempt number
    rel_ticks: np.ndarray  # i8, ticks since the owning trigger
    header: StreamHeader | None = None

    def select(self, channel: int) -> tuple[np.ndarray, np.ndarray]:
        """(attempt_index, rel_ticks) of one channel's tags."""
        mask = self.channel == channel
        return self.attempt_index[mask], self.rel_ticks[mask]


def collect_stream(stream: TagStream, keep_channels=(Channel.VISIBLE, Channel.TELECOM)
                   ) -> CollectedRun:
    """Attribute every tag to its trigger in one pass over the stream.

    Tags arriving before the first trigger have no owner and are tallied as
    orphans. The stream's header attempt count, when present, must match the
    number of channel-0 records seen.
    """
    keep = np.zeros(256, dtype=bool)
    for ch in keep_channels:
        if int(ch) == int(Channel.TRIGGER):
            raise ValueError("cannot collect the trigger channel against itself")
        keep[int(ch)] = True

    parts_ch: list[np.ndarray] = []
    parts_idx: list[np.ndarray] = []
    parts_rel: list[np.ndarray] = []
    attempts = 0
    orphans = 0
    carry_tick = 0
    have_carry = False

    for block in stream.blocks():
        if not len(block):
            continue
        ch = block["channel"]
        ticks = block["ticks"].astype(np.int64)
        is_trig = ch == int(Channel.TRIGGER)
        n_trig = int(is_trig.sum())
        sel = keep[ch]
        if np.any(sel):
            trig_ticks = ticks[is_trig]
            # Number of triggers at or before each record; tick ties sort
            # the trigger first, so an equal-tick tag lands on that trigger.
            owner_local = np.cumsum(is_trig)[sel] - 1
            tag_ticks = ticks[sel]
            tag_ch = ch[sel]
            no_owner = owner_local < 0
            if not have_carry and np.any(no_owner):
                orphans += int(no_owner.sum())
                with_owner = ~no_owner
                owner_local = owner_local[with_owner]
                tag_ticks = tag_ticks[with_owner]
                tag_ch = tag_ch[with_owner]
                no_owner = no_owner[with_owner]
            if len(owner_local):
                if n_trig:
                    owner_tick = np.where(
                        no_owner, carry_tick,
                        trig_ticks[np.maximum(owner_local, 0)])
                else:
                    owner_tick = np.full(len(owner_local), carry_tick,
                                         dtype=np.int64)
                parts_ch.append(tag_ch)
                parts_idx.append(owner_local + attempts)
                parts_rel.append(tag_ticks - owner_tick)
        attempts += n_trig
        if n_trig:
            carry_tick = int(ticks[is_trig][-1])
            have_carry = True

    header = stream.header
    if header is not None and header.attempt_count != attempts:
        raise ValueError(
            f"stream header promises {header.attempt_count} attempts but "
            f"{attempts} trigger records were found"
        )

    def cat(parts, dtype):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    return CollectedRun(
        attempts=attempts,
        tick_ps=header.tick_ps if header else 80,
        orphans=orphans,
        channel=cat(parts_ch, np.uint8),
        attempt_index=cat(parts_idx, np.int64),
        rel_ticks=cat(parts_rel, np.int64),
        header=header,
    )


def _as_run(source) -> CollectedRun:
    if isinstance(source, CollectedRun):
        return source
    if isinstance(source, TagStream):
        return collect_stream(source)
    raise TypeError(f"expected a TagStream or CollectedRun, got {type(source)!r}")


def build_histogram(source, channel: int, bin_ns: float = 0.8,
                    range_ns: tuple[float, float] = (0.0, 1400.0)) -> Histogram:
    """Histogram of one channel's trigger-relative arrival times.

    Tags outside the range fall off silently; tags before the first trigger
    are excluded and reported in the orphan tally. Bin membership is half-open
    [edge, edge + bin_ns) in ns; a tag exactly on an edge goes to the upper
    bin even when the division lands an ulp low.
    """
    run = _as_run(source)
    lo_ns, hi_ns = range_ns
    if hi_ns <= lo_ns:
        raise ValueError("histogram range must be increasing")
    if bin_ns <= 0.0:
        raise ValueError("bin width must be positive")
    nbins = int(round((hi_ns - lo_ns) / bin_ns))
    if nbins < 1:
        raise ValueError("histogram range is narrower than one bin")

    _, rel = run.select(channel)
    rel_ns = rel * (run.tick_ps * 1e-3)
    idx = np.floor((rel_ns - lo_ns) / bin_ns + _EDGE_EPS).astype(np.int64)
    ok = (idx >= 0) & (idx < nbins)
    counts = np.bincount(idx[ok], minlength=nbins).astype(np.int64)
    return Histogram(
        channel=channel,
        bin_ns=bin_ns,
        origin_ns=lo_ns,
        counts=counts,
        attempts=run.attempts,
        orphans=run.orphans,
        tick_ps=run.tick_ps,
    )


def window_counts(source, window: WindowSpec, channel: int | None = None) -> float:
    """Counts in a trigger-relative window.

    On a Histogram, partial bin overlap is prorated linearly (a window
    covering half a bin takes half its counts) and the result is a float.
    On a stream or collected run (``channel`` required), tags are tested
    individually on the tick grid and the result is an exact integer count.
    An empty overlap is 0, not an error.
    """
    if isinstance(source, Histogram):
        hist = source
        edges = hist.edges_ns
        overlap = (np.minimum(edges[1:], window.end_ns)
                   - np.maximum(edges[:-1], window.start_ns))
        overlap = np.clip(overlap, 0.0, hist.bin_ns) / hist.bin_ns
        return float(np.dot(hist.counts, overlap))
    run = _as_run(source)
    if channel is None:
        raise ValueError("channel is required when counting directly from tags")
    _, rel = run.select(channel)
    lo_t, hi_t = window.tick_range(run.tick_ps)
    return float(np.count_nonzero((rel >= lo_t) & (rel < hi_t)))


def sbr(window_total: float, noise_total: float) -> SbrResult:
    """Signal-to-background ratio (T - N) / N with Poisson error propagation.

    ``window_total`` is the raw signal-window count T, ``noise_total`` the
    equal-width noise-window count N. Zero noise counts leave the ratio
    undefined.
    """
    if window_total < 0.0 or noise_total < 0.0:
        raise ValueError("counts must be >= 0")
    if noise_total == 0.0:
        raise ValueError("noise window is empty; signal-to-background undefined")
    value = (window_total - noise_total) / noise_total
    sigma = math.sqrt(window_total / noise_total**2
                      + window_total**2 / noise_total**3)
    return SbrResult(value=value, sigma=sigma,
                     window_total=window_total, noise_total=noise_total)


def expected_g2_zero(counts: CountSummary) -> float:
    """Zero-shift cross correlation implied by window totals alone.

    Accidental coincidences from signal-noise and noise-noise pairings,
    normalized by the uncorrelated expectation. Pure noise on both channels
    gives 2 (noise-window counts double-count into the totals); zero noise
    gives 0.
    """
    r = counts.attempts
    c1s, c1n = counts.telecom_signal, counts.telecom_noise
    c2s, c2n = counts.visible_signal, counts.visible_noise
    if counts.telecom_total <= 0.0 or counts.visible_total <= 0.0:
        raise ValueError("both channels need nonzero window totals")
    g_unnorm = (c1s * c2n + c1n * c2s + 2.0 * c1n * c2n) / r
    a_norm = counts.telecom_total * counts.visible_total / r
    return g_unnorm / a_norm


def _hit_attempts(run: CollectedRun, channel: int, window: WindowSpec) -> np.ndarray:
    """Sorted unique attempt indices with an in-window tag on ``channel``."""
    idx, rel = run.select(channel)
    lo_t, hi_t = window.tick_range(run.tick_ps)
    return np.unique(idx[(rel >= lo_t) & (rel < hi_t)])


def g2_cross(source, window_1: WindowSpec, window_2: WindowSpec,
             max_n: int = 250, attempts_per_shift: int = 500,
             channel_1: int = Channel.TELECOM, channel_2: int = Channel.VISIBLE
             ) -> CorrelationResult:
    """Windowed cross correlation between the two photon channels.

    Each attempt gets a hit flag per channel from its in-window detections;
    ``C12(n)`` counts attempts where channel 1 hit attempt ``i`` and channel
    2 hit attempt ``i + n * attempts_per_shift``. Shifts run over
    ``n in [-max_n, max_n]``; one shift unit is one experimental cycle when
    ``attempts_per_shift`` matches the sequence. Normalization is the
    uncorrelated expectation ``hits_1 * hits_2 / attempts``, so an
    uncorrelated stream averages to 1.
    """
    run = _as_run(source)
    if max_n < 0:
        raise ValueError(f"max_n must be >= 0, got {max_n}")
    if attempts_per_shift < 1:
        raise ValueError(f"attempts_per_shift must be >= 1, got {attempts_per_shift}")
    if run.attempts <= 0:
        raise ValueError("correlation needs a stream with triggers")
    hits1 = _hit_attempts(run, channel_1, window_1)
    hits2 = _hit_attempts(run, channel_2, window_2)
    if not len(hits1) or not len(hits2):
        raise ValueError("correlation needs windowed hits on both channels")

    n_values = np.arange(-max_n, max_n + 1, dtype=np.int64)
    coincidences = np.zeros(len(n_values), dtype=np.int64)
    for j, n in enumerate(n_values):
        shifted = hits2 - n * attempts_per_shift
        pos = np.searchsorted(hits1, shifted)
        pos = np.clip(pos, 0, len(hits1) - 1)
        coincidences[j] = int(np.count_nonzero(hits1[pos] == shifted))

    norm = len(hits1) * len(hits2) / run.attempts
    g2 = coincidences / norm
    # Poisson error on the raw pair count; an empty bin gets the one-count
    # upper scale instead of a meaningless zero.
    sigma = np.where(coincidences > 0,
                     g2 / np.sqrt(np.maximum(coincidences, 1)),
                     1.0 / norm)
    return CorrelationResult(
        n_values=n_values,
        g2=g2,
        sigma=sigma,
        coincidences=coincidences,
        hits_1=len(hits1),
        hits_2=len(hits2),
        attempts=run.attempts,
        attempts_per_shift=attempts_per_shift,
    )


def background_subtract_normalize(hist: Histogram, noise_window: WindowSpec
                                  ) -> np.ndarray:
    """Unit-area pulse shape after flat background removal.

    The per-bin background is the mean prorated count inside the noise
    window, which must lie entirely inside the histogram range. Negative
    bins after subtraction clamp to zero. A histogram with nothing above the
    background cannot be normalized.
    """
    end_ns = hist.origin_ns + hist.nbins * hist.bin_ns
    if (noise_window.start_ns < hist.origin_ns - _EDGE_EPS
            or noise_window.end_ns > end_ns + _EDGE_EPS):
        raise ValueError("noise window must lie inside the histogram range")
    width_bins = noise_window.width_ns / hist.bin_ns
    floor = window_counts(hist, noise_window) / width_bins
    shape = hist.counts.astype(float) - floor
    # Proration fuzz in the floor is ~1e-13 relative; bins within that of the
    # floor carry no signal and must not survive into the normalization.
    shape[shape <= floor * 1e-9] = 0.0
    total = shape.sum()
    if total <= 0.0:
        raise DegenerateShapeError(
            "no counts above the background floor; cannot normalize"
        )
    return shape / total


def shape_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap of two unit-area shapes: 1 - total variation distance.

    1.0 for identical shapes, 0.0 for disjoint support. Requires identical
    binning, checked here by length.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"binning mismatch: {a.shape} vs {b.shape}")
    return float(1.0 - 0.5 * np.abs(a - b).sum())


def place_signal_window(hist: Histogram, width_ns: float) -> WindowSpec:
    """Signal window anchored one bin before the pulse's leading edge.

    The leading edge is located by sliding a window-sized boxcar over the
    histogram and taking the position capturing the most counts, which is
    far more stable on sparse data than a per-bin peak; on a well-populated
    histogram it lands exactly on the peak bin's leading edge. Backing off
    one bin keeps the rising edge inside the window despite binning.
    """
    if hist.total == 0:
        raise ValueError("cannot place a window on an empty histogram")
    width_bins = max(1, int(round(width_ns / hist.bin_ns)))
    width_bins = min(width_bins, hist.nbins)
    csum = np.concatenate(([0], np.cumsum(hist.counts)))
    rolling = csum[width_bins:] - csum[:-width_bins]
    edge = int(np.argmax(rolling))
    start_ns = hist.origin_ns + (edge - 1) * hist.bin_ns
    return WindowSpec(start_ns=start_ns, width_ns=width_ns)


def noise_window_for(signal: WindowSpec, delay_ns: float = 300.0) -> WindowSpec:
    """Equal-width noise window at a fixed delay after the signal window."""
    if delay_ns < signal.width_ns:
        raise ValueError("noise window would overlap the signal window")
    return WindowSpec(start_ns=signal.start_ns + delay_ns, width_ns=signal.width_ns)


def optimize_window(hist: Histogram, noise_per_bin: float,
                    criterion: str = "max_sbr", sbr_floor: float | None = None,
                    max_width_ns: float | None = None) -> WindowSpec:
    """Best counting window against a known flat background.

    ``max_sbr`` maximizes (T - N) / N over all bin-aligned windows, which
    drives the window toward the sharpest part of the pulse;
    ``max_capture_at_sbr_floor`` maximizes the background-subtracted counts
    T - N among windows whose SBR stays at or above ``sbr_floor``, trading
    purity for capture. Ties prefer the smaller width, then the earlier
    start. With no background at all every window is infinitely pure, so the
    widest allowed window wins by capture.
    """
    if criterion not in ("max_sbr", "max_capture_at_sbr_floor"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if noise_per_bin < 0.0:
        raise ValueError(f"noise_per_bin must be >= 0, got {noise_per_bin}")
    if criterion == "max_capture_at_sbr_floor" and sbr_floor is None:
        raise ValueError("max_capture_at_sbr_floor needs an sbr_floor")

    counts = hist.counts.astype(float)
    nbins = hist.nbins
    max_bins = nbins
    if max_width_ns is not None:
        max_bins = min(nbins, int(max_width_ns / hist.bin_ns))
        if max_bins < 1:
            raise ValueError("max_width_ns is narrower than one bin")

    if not np.any(counts > noise_per_bin):
        raise ValueError("no bins above the background; nothing to optimize")

    def window_at(start_bin: int, width_bins: int) -> WindowSpec:
        return WindowSpec(start_ns=hist.origin_ns + start_bin * hist.bin_ns,
                          width_ns=width_bins * hist.bin_ns)

    if noise_per_bin == 0.0:
        return window_at(0, max_bins)

    csum = np.concatenate(([0.0], np.cumsum(counts)))
    best_key: tuple | None = None
    best_window: tuple[int, int] | None = None
    for width in range(1, max_bins + 1):
        totals = csum[width:] - csum[:-width]
        background = noise_per_bin * width
        if criterion == "max_sbr":
            values = (totals - background) / background
            start = int(np.argmax(values))  # first occurrence: earliest start
            key = (float(values[start]),)
        else:
            net = totals - background
            feasible = (totals - background) / background >= sbr_floor
            if not np.any(feasible):
                continue
            net = np.where(feasible, net, -np.inf)
            start = int(np.argmax(net))
            key = (float(net[start]),)
        # Strictly-better comparison: ascending width scan keeps the
        # smallest width on ties, argmax the earliest start.
        if best_key is None or key > best_key:
            best_key = key
            best_window = (start, width)
    if best_window is None:
        raise ValueError("no window satisfies the signal-to-background floor")
    return window_at(*best_window)
