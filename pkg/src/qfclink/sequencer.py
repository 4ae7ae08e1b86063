"""Attempt scheduling and the seeded Monte Carlo time-tag generator.

A run is a train of identical cycles: a cooling period followed by a fixed
number of excitation attempts. Every attempt emits a hardware trigger tag and
may produce at most one signal detection on one of the two photon channels;
detector noise rides on top as a homogeneous Poisson process. All randomness
comes from a counter-based generator keyed on (master seed, cycle, purpose,
index), so the byte stream is a pure function of seed and configuration and
does not depend on how the work is batched or parallelized.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.special import gammaln

from .model import DetectorSpec, SourceSpec

__all__ = [
    "Channel",
    "TAG_DTYPE",
    "SequenceSpec",
    "RunPlan",
    "ScheduleSummary",
    "StreamHeader",
    "TagStream",
    "build_schedule",
    "split_seed",
    "simulate_run",
]

# On-disk and in-memory record layout: one byte of channel id, eight bytes of
# tick count since the start of the run.
TAG_DTYPE = np.dtype([("channel", "u1"), ("ticks", "<u8")])

DEFAULT_TICK_PS = 80  # timing resolution of the tagger, ps per tick


class Channel(IntEnum):
    """Hardware channel ids as they appear in tag records."""

    TRIGGER = 0  # attempt trigger from the sequencer
    VISIBLE = 1  # direct emission arm (PMT)
    TELECOM = 2  # frequency-converted arm (SNSPD)


@dataclass(frozen=True)
class SequenceSpec:
    """Timing skeleton of one experimental cycle.

    A cycle is ``cooling_us`` of state preparation followed by
    ``attempts_per_cycle`` attempts and an optional ``dead_time_us`` idle
    tail. Within an attempt: optical pumping, a fixed delay, the trigger
    pulse, then the excitation pulse; the remainder of the attempt period
    is idle.
    """

    cooling_us: float = 100.0
    attempts_per_cycle: int = 500
    attempt_us: float = 10.0
    pump_us: float = 8.0
    delay_ns: float = 600.0
    trigger_ns: float = 200.0
    excite_ns: float = 200.0
    dead_time_us: float = 0.0  # idle tail after the last attempt of a cycle

    def __post_init__(self) -> None:
        for name in ("cooling_us", "attempt_us", "pump_us", "delay_ns",
                     "trigger_ns", "excite_ns"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dead_time_us < 0.0:
            raise ValueError(
                f"dead_time_us must be >= 0, got {self.dead_time_us}")
        if self.attempts_per_cycle < 1:
            raise ValueError(
                f"attempts_per_cycle must be >= 1, got {self.attempts_per_cycle}"
            )
        used_ns = (self.pump_us * 1e3 + self.delay_ns + self.trigger_ns
                   + self.excite_ns)
        if used_ns > self.attempt_us * 1e3:
            raise ValueError(
                f"attempt phases ({used_ns} ns) do not fit in the "
                f"{self.attempt_us * 1e3} ns attempt period"
            )

    @property
    def attempt_ns(self) -> float:
        return self.attempt_us * 1e3

    @property
    def cycle_ns(self) -> float:
        return (self.cooling_us * 1e3 + self.attempts_per_cycle * self.attempt_ns
                + self.dead_time_us * 1e3)

    @property
    def trigger_offset_ns(self) -> float:
        """Trigger pulse start relative to the attempt start."""
        return self.pump_us * 1e3 + self.delay_ns

    @property
    def excite_offset_ns(self) -> float:
        """Excitation pulse start relative to the attempt start."""
        return self.trigger_offset_ns + self.trigger_ns

    @property
    def attempt_rate_hz(self) -> float:
        """Attempt repetition rate within a cycle."""
        return 1e9 / self.attempt_ns


@dataclass(frozen=True)
class RunPlan:
    """How long to run and with what seed.

    Exactly one of ``attempts`` (attempt-count mode) or ``duration_s``
    (wall-clock mode, rounded down to whole cycles) must be given.
    """

    master_seed: int
    attempts: int | None = None
    duration_s: float | None = None
    tick_ps: int = DEFAULT_TICK_PS

    def __post_init__(self) -> None:
        if (self.attempts is None) == (self.duration_s is None):
            raise ValueError("exactly one of attempts or duration_s must be set")
        if self.attempts is not None and self.attempts < 0:
            raise ValueError(f"attempts must be >= 0, got {self.attempts}")
        if self.duration_s is not None and self.duration_s < 0.0:
            raise ValueError(f"duration_s must be >= 0, got {self.duration_s}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")
        if self.tick_ps <= 0:
            raise ValueError(f"tick_ps must be positive, got {self.tick_ps}")


def _ticks(ns: float, tick_ps: int) -> int:
    """Convert nanoseconds to ticks, rounding half up."""
    return int(math.floor(ns * 1000.0 / tick_ps + 0.5))


@dataclass(frozen=True)
class ScheduleSummary:
    """Integer-tick layout of a planned run."""

    attempts: int
    cycles: int
    attempts_per_cycle: int
    tick_ps: int
    cooling_ticks: int
    attempt_ticks: int
    cycle_ticks: int
    trigger_offset_ticks: int  # within an attempt
    excite_offset_ticks: int  # within an attempt
    total_ticks: int  # end of the last attempt period

    @property
    def wallclock_s(self) -> float:
        return self.total_ticks * self.tick_ps * 1e-12

    def attempts_in_cycle(self, cycle: int) -> int:
        if not 0 <= cycle < self.cycles:
            raise IndexError(f"cycle {cycle} outside [0, {self.cycles})")
        if cycle < self.cycles - 1:
            return self.attempts_per_cycle
        return self.attempts - (self.cycles - 1) * self.attempts_per_cycle

    def cycle_span_ticks(self, cycle: int) -> int:
        """Occupied ticks of a cycle (shorter for a trailing partial cycle)."""
        return self.cooling_ticks + self.attempts_in_cycle(cycle) * self.attempt_ticks

    def trigger_epoch_ticks(self, attempt):
        """Absolute tick of the trigger for attempt index (scalar or array)."""
        attempt = np.asarray(attempt, dtype=np.int64)
        if np.any((attempt < 0) | (attempt >= self.attempts)):
            raise IndexError("attempt index outside the planned run")
        cycle, within = np.divmod(attempt, self.attempts_per_cycle)
        epoch = (cycle * self.cycle_ticks + self.cooling_ticks
                 + within * self.attempt_ticks + self.trigger_offset_ticks)
        return int(epoch) if epoch.ndim == 0 else epoch


def build_schedule(seq: SequenceSpec, plan: RunPlan) -> ScheduleSummary:
    """Lay out a run on the integer tick grid.

    Wall-clock plans are truncated to whole cycles; attempt-count plans may
    end inside a cycle, in which case the trailing cycle simply stops after
    its last attempt. Refuses runs whose final tick would overflow the
    signed 64-bit arithmetic used throughout.
    """
    tick_ps = plan.tick_ps
    cooling_ticks = _ticks(seq.cooling_us * 1e3, tick_ps)
    attempt_ticks = _ticks(seq.attempt_ns, tick_ps)
    cycle_ticks = (cooling_ticks + seq.attempts_per_cycle * attempt_ticks
                   + _ticks(seq.dead_time_us * 1e3, tick_ps))

    if plan.attempts is not None:
        attempts = plan.attempts
    else:
        duration_ticks = _ticks(plan.duration_s * 1e9, tick_ps)
        attempts = (duration_ticks // cycle_ticks) * seq.attempts_per_cycle

    cycles = -(-attempts // seq.attempts_per_cycle)  # ceil division
    if attempts == 0:
        total_ticks = 0
    else:
        tail_attempts = attempts - (cycles - 1) * seq.attempts_per_cycle
        total_ticks = ((cycles - 1) * cycle_ticks + cooling_ticks
                       + tail_attempts * attempt_ticks)
    if total_ticks >= 2**63:
        overflow_attempt = (2**63 // (cycle_ticks // seq.attempts_per_cycle))
        raise OverflowError(
            f"run of {attempts} attempts spans {total_ticks} ticks and exceeds "
            f"the 63-bit tick range near attempt {overflow_attempt}"
        )
    return ScheduleSummary(
        attempts=attempts,
        cycles=cycles,
        attempts_per_cycle=seq.attempts_per_cycle,
        tick_ps=tick_ps,
        cooling_ticks=cooling_ticks,
        attempt_ticks=attempt_ticks,
        cycle_ticks=cycle_ticks,
        trigger_offset_ticks=_ticks(seq.trigger_offset_ns, tick_ps),
        excite_offset_ticks=_ticks(seq.excite_offset_ns, tick_ps),
        total_ticks=total_ticks,
    )


# SplitMix64 finalizer constants. The generator is counter-based: every
# random number is a hash of where it is used, never of a mutable state, so
# any subset of the stream can be regenerated independently.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)

# Stream labels separating the independent uses of randomness inside one
# cycle. Arbitrary fixed odd constants.
_S_OUTCOME = np.uint64(0xC2B2AE3D27D4EB4F)
_S_DELAY = np.uint64(0x165667B19E3779F9)
_S_JITTER_U = np.uint64(0x27D4EB2F165667C5)
_S_JITTER_V = np.uint64(0x9E3779B97F4A7C55)
_S_NOISE_N_VIS = np.uint64(0x85EBCA77C2B2AE63)
_S_NOISE_N_TEL = np.uint64(0xD6E8FEB86659FD93)
_S_NOISE_T_VIS = np.uint64(0xA0761D6478BD642F)
_S_NOISE_T_TEL = np.uint64(0xE7037ED1A0B428DB)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX_A
        x = (x ^ (x >> np.uint64(27))) * _MIX_B
        return x ^ (x >> np.uint64(31))


def split_seed(master_seed: int, block_index) -> int | np.ndarray:
    """Deterministic sub-seed for a numbered block of work.

    A bijective 64-bit hash of the master seed and the block index: distinct
    indices give statistically independent seeds, the same pair always gives
    the same seed, on every platform. Accepts an array of indices.
    """
    if not 0 <= master_seed < 2**64:
        raise ValueError("master_seed must fit in an unsigned 64-bit integer")
    idx = np.asarray(block_index)
    if idx.dtype.kind != "u" and np.any(idx < 0):
        raise ValueError("block_index must be >= 0")
    idx = idx.astype(np.uint64)
    with np.errstate(over="ignore"):
        out = _mix64(np.uint64(master_seed) + (idx + np.uint64(1)) * _GOLDEN)
    return int(out) if out.ndim == 0 else out


def _stream_base(cycle_seeds: np.ndarray, label: np.uint64) -> np.ndarray:
    """Per-cycle base of one named random stream."""
    return _mix64(cycle_seeds ^ label)


def _u53(base: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Uniform doubles in [0, 1) at positions ``index`` of streams ``base``."""
    with np.errstate(over="ignore"):
        word = _mix64(base + (index.astype(np.uint64) + np.uint64(1)) * _GOLDEN)
    return (word >> np.uint64(11)) * 2.0**-53


@dataclass(frozen=True)
class StreamHeader:
    """Metadata carried alongside every tag stream."""

    tick_ps: int
    channel_count: int
    attempt_count: int
    master_seed: int
    config_digest: bytes = b"\x00" * 32

    def __post_init__(self) -> None:
        if self.tick_ps <= 0:
            raise ValueError(f"tick_ps must be positive, got {self.tick_ps}")
        if not 1 <= self.channel_count <= 255:
            raise ValueError(f"channel_count must be in [1, 255], got {self.channel_count}")
        if self.attempt_count < 0:
            raise ValueError(f"attempt_count must be >= 0, got {self.attempt_count}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")
        if len(self.config_digest) != 32:
            raise ValueError("config_digest must be exactly 32 bytes")


class TagStream:
    """A time-ordered stream of tag records plus its header.

    Records are delivered as structured-array blocks (``TAG_DTYPE``) in
    ascending tick order, tick ties broken by channel id. The block factory
    is re-iterable: each call to :meth:`blocks` yields the same records
    again, which lets consumers take multiple passes over simulated data
    without materializing it.
    """

    def __init__(self, header: StreamHeader,
                 block_factory: Callable[[], Iterator[np.ndarray]]):
        self.header = header
        self._block_factory = block_factory

    def blocks(self) -> Iterator[np.ndarray]:
        """Iterate the records as structured-array blocks."""
        return self._block_factory()

    def to_records(self) -> np.ndarray:
        """Materialize the whole stream as one structured array."""
        parts = [b for b in self.blocks() if len(b)]
        if not parts:
            return np.empty(0, dtype=TAG_DTYPE)
        return np.concatenate(parts)

    @classmethod
    def from_records(cls, header: StreamHeader, records) -> TagStream:
        """Wrap an in-memory record list; validates ordering up front."""
        arr = np.asarray(records, dtype=TAG_DTYPE) if not isinstance(records, np.ndarray) \
            else records.astype(TAG_DTYPE, copy=False)
        if len(arr) > 1 and np.any(np.diff(arr["ticks"].astype(np.int64)) < 0):
            raise ValueError("records must be in nondecreasing tick order")
        if np.any(arr["channel"] >= header.channel_count):
            raise ValueError("record channel id outside the header's channel count")
        return cls(header, lambda: iter((arr,)))


def _merge_ordered(trig_ticks: np.ndarray, other_channel: np.ndarray,
                   other_ticks: np.ndarray) -> np.ndarray:
    """Merge sorted trigger ticks with a small batch of other tags.

    Equivalent to a full (ticks, channel) lexsort of the union, but only the
    small side is actually sorted; triggers (channel 0) win tick ties.
    """
    order = np.lexsort((other_channel, other_ticks))
    och = other_channel[order]
    oti = other_ticks[order]
    pos = np.searchsorted(trig_ticks, oti, side="right")
    n = len(trig_ticks) + len(oti)
    out = np.empty(n, dtype=TAG_DTYPE)
    other_at = pos + np.arange(len(oti), dtype=np.int64)
    trig_at = np.ones(n, dtype=bool)
    trig_at[other_at] = False
    out["channel"][other_at] = och
    out["ticks"][other_at] = oti.astype(np.uint64)
    out["channel"][trig_at] = Channel.TRIGGER
    out["ticks"][trig_at] = trig_ticks.astype(np.uint64)
    return out


def _poisson_inverse_table(mean: float) -> tuple[int, np.ndarray]:
    """Truncated inverse-CDF table for Poisson(mean).

    Built in log space around the mean so it stays usable far beyond where
    exp(-mean) underflows; the truncated tail mass is far below the 2^-53
    resolution of the uniforms fed into it.
    """
    if mean < 0.0:
        raise ValueError(f"mean must be >= 0, got {mean}")
    if mean == 0.0:
        return 0, np.array([1.0])
    half = 12.0 * math.sqrt(mean) + 30.0
    k_lo = max(0, int(math.floor(mean - half)))
    k_hi = int(math.ceil(mean + half))
    k = np.arange(k_lo, k_hi + 1, dtype=np.float64)
    logpmf = k * math.log(mean) - mean - gammaln(k + 1.0)
    pmf = np.exp(logpmf - logpmf.max())
    cdf = np.cumsum(pmf)
    cdf /= cdf[-1]
    return k_lo, cdf


class _NoiseModel:
    """Per-channel homogeneous Poisson noise over each cycle's span."""

    def __init__(self, channel: int, rate_hz: float, count_label: np.uint64,
                 time_label: np.uint64, offset_ticks: int, span_ticks: int,
                 tick_ps: int):
        self.channel = channel
        self.rate_hz = rate_hz
        self.count_label = count_label
        self.time_label = time_label
        self.offset_ticks = offset_ticks
        self.span_ticks = span_ticks
        mean = rate_hz * span_ticks * tick_ps * 1e-12
        self.k0, self.cdf = _poisson_inverse_table(mean)

    def draw(self, cycle_seeds: np.ndarray, cycle_start_ticks: np.ndarray
             ) -> tuple[np.ndarray, np.ndarray]:
        """Noise tag (channels, ticks) for the given cycles, unsorted."""
        if self.rate_hz == 0.0 or self.span_ticks == 0:
            empty = np.empty(0, dtype=np.int64)
            return empty.astype(np.uint8), empty
        u = _u53(_stream_base(cycle_seeds, self.count_label),
                 np.zeros(len(cycle_seeds), dtype=np.uint64))
        counts = self.k0 + np.searchsorted(self.cdf, u, side="right")
        total = int(counts.sum())
        if total == 0:
            empty = np.empty(0, dtype=np.int64)
            return empty.astype(np.uint8), empty
        owner = np.repeat(np.arange(len(cycle_seeds)), counts)
        within = (np.arange(total, dtype=np.int64)
                  - np.repeat(np.cumsum(counts) - counts, counts))
        ut = _u53(_stream_base(cycle_seeds, self.time_label)[owner],
                  within.astype(np.uint64))
        ticks = (cycle_start_ticks[owner] + self.offset_ticks
                 + np.floor(ut * self.span_ticks).astype(np.int64))
        channels = np.full(total, self.channel, dtype=np.uint8)
        return channels, ticks


def simulate_run(
    seq: SequenceSpec,
    plan: RunPlan,
    source: SourceSpec,
    visible_detector: DetectorSpec,
    telecom_detector: DetectorSpec,
    visible_noise_hz: float,
    telecom_noise_hz: float,
    *,
    gate_noise_to_attempts: bool = False,
    config_digest: bytes = b"\x00" * 32,
    batch_cycles: int = 4096,
    workers: int = 1,
) -> TagStream:
    """Generate the tag stream of a planned run.

    Per attempt, a single categorical draw decides between a visible
    detection, a telecom detection, or no detection; at most one signal tag
    per attempt, so the two channels are exclusive by construction. A signal
    tag lands at the excitation epoch plus an exponential emission delay plus
    Gaussian detector jitter, rounded half-up to the tick grid. Channel noise
    is homogeneous Poisson over each cycle's full period, including any dead
    tail; a trailing partial cycle ends with its last attempt, and with
    ``gate_noise_to_attempts`` the noise covers only the attempt region. The
    source's in-window
    probabilities are first converted to whole-decay probabilities with the
    reference-window capture fraction, so the counts inside the reference
    window come out at the configured values.

    The result is identical for any ``batch_cycles`` and ``workers`` choice.
    """
    if visible_noise_hz < 0.0 or telecom_noise_hz < 0.0:
        raise ValueError("noise rates must be >= 0")
    if batch_cycles < 1:
        raise ValueError(f"batch_cycles must be >= 1, got {batch_cycles}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    sched = build_schedule(seq, plan)
    header = StreamHeader(
        tick_ps=plan.tick_ps,
        channel_count=3,
        attempt_count=sched.attempts,
        master_seed=plan.master_seed,
        config_digest=config_digest,
    )

    p_vis = source.p_visible_total
    p_tel = source.p_telecom_total
    ticks_per_ns = 1000.0 / plan.tick_ps
    jitter_vis_ns = visible_detector.jitter_sigma_ps * 1e-3
    jitter_tel_ns = telecom_detector.jitter_sigma_ps * 1e-3
    apc = sched.attempts_per_cycle

    def noise_models(span_attempts: int, last_cycle: bool) -> list[_NoiseModel]:
        if gate_noise_to_attempts:
            offset = sched.cooling_ticks
            span = span_attempts * sched.attempt_ticks
        else:
            # Ungated detectors keep counting through any dead tail between
            # cycles, so a mid-run cycle's noise spans the whole cycle
            # period. The run itself ends with its last attempt.
            offset = 0
            span = (sched.cooling_ticks + span_attempts * sched.attempt_ticks
                    if last_cycle else sched.cycle_ticks)
        return [
            _NoiseModel(Channel.VISIBLE, visible_noise_hz, _S_NOISE_N_VIS,
                        _S_NOISE_T_VIS, offset, span, plan.tick_ps),
            _NoiseModel(Channel.TELECOM, telecom_noise_hz, _S_NOISE_N_TEL,
                        _S_NOISE_T_TEL, offset, span, plan.tick_ps),
        ]

    full_noise = noise_models(apc, last_cycle=False)
    tail_attempts = sched.attempts - (sched.cycles - 1) * apc if sched.cycles else 0
    last_noise = noise_models(tail_attempts, last_cycle=True)

    def generate(cycle_lo: int, cycle_hi: int) -> np.ndarray:
        n_cycles = cycle_hi - cycle_lo
        cycles = np.arange(cycle_lo, cycle_hi, dtype=np.int64)
        cycle_seeds = split_seed(plan.master_seed, cycles)
        cycle_start = cycles * sched.cycle_ticks
        att_in_cycle = np.full(n_cycles, apc, dtype=np.int64)
        if cycle_hi == sched.cycles:
            att_in_cycle[-1] = tail_attempts

        # Trigger epochs for every attempt of the batch.
        owner = np.repeat(np.arange(n_cycles), att_in_cycle)
        within = (np.arange(len(owner), dtype=np.int64)
                  - np.repeat(np.cumsum(att_in_cycle) - att_in_cycle, att_in_cycle))
        trig_ticks = (cycle_start[owner] + sched.cooling_ticks
                      + within * sched.attempt_ticks + sched.trigger_offset_ticks)

        # One categorical draw per attempt decides the detection outcome.
        u = _u53(_stream_base(cycle_seeds, _S_OUTCOME)[owner],
                 within.astype(np.uint64))
        hit_vis = u < p_vis
        hit_tel = (u >= p_vis) & (u < p_vis + p_tel)

        det_parts_ch: list[np.ndarray] = []
        det_parts_ticks: list[np.ndarray] = []
        for mask, channel, jitter_ns in (
            (hit_vis, np.uint8(Channel.VISIBLE), jitter_vis_ns),
            (hit_tel, np.uint8(Channel.TELECOM), jitter_tel_ns),
        ):
            idx = np.nonzero(mask)[0]
            if not len(idx):
                continue
            base = _stream_base(cycle_seeds, _S_DELAY)[owner[idx]]
            delay_ns = -source.tau_ns * np.log1p(-_u53(base, within[idx].astype(np.uint64)))
            if jitter_ns > 0.0:
                ua = _u53(_stream_base(cycle_seeds, _S_JITTER_U)[owner[idx]],
                          within[idx].astype(np.uint64))
                ub = _u53(_stream_base(cycle_seeds, _S_JITTER_V)[owner[idx]],
                          within[idx].astype(np.uint64))
                delay_ns = delay_ns + jitter_ns * (
                    np.sqrt(-2.0 * np.log1p(-ua)) * np.cos(2.0 * np.pi * ub))
            delta = np.floor(delay_ns * ticks_per_ns + 0.5).astype(np.int64)
            ticks = (trig_ticks[idx] + (sched.excite_offset_ticks
                                        - sched.trigger_offset_ticks) + delta)
            det_parts_ch.append(np.full(len(idx), channel, dtype=np.uint8))
            det_parts_ticks.append(ticks)

        # The span of the last cycle differs from the rest, so it draws from
        # its own models; every other cycle uses the full-cycle ones. Which
        # model covers a cycle depends only on the cycle index, which keeps
        # the stream independent of the batch partition.
        has_last = cycle_hi == sched.cycles
        n_full = n_cycles - 1 if has_last else n_cycles
        for model in full_noise:
            if n_full == 0:
                break
            ch, ticks = model.draw(cycle_seeds[:n_full], cycle_start[:n_full])
            if len(ch):
                det_parts_ch.append(ch)
                det_parts_ticks.append(ticks)
        if has_last:
            for model in last_noise:
                ch, ticks = model.draw(cycle_seeds[-1:], cycle_start[-1:])
                if len(ch):
                    det_parts_ch.append(ch)
                    det_parts_ticks.append(ticks)

        if det_parts_ch:
            other_ch = np.concatenate(det_parts_ch)
            other_ticks = np.concatenate(det_parts_ticks)
        else:
            other_ch = np.empty(0, dtype=np.uint8)
            other_ticks = np.empty(0, dtype=np.int64)
        return _merge_ordered(trig_ticks, other_ch, other_ticks)

    spans = [(lo, min(lo + batch_cycles, sched.cycles))
             for lo in range(0, sched.cycles, batch_cycles)]

    def blocks() -> Iterator[np.ndarray]:
        if workers == 1 or len(spans) <= 1:
            for lo, hi in spans:
                yield generate(lo, hi)
            return
        # Parallel batch generation; results are yielded in batch order so
        # the stream is byte-identical to the singlethreaded one.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending: deque = deque()
            it = iter(spans)
            for lo, hi in itertools.islice(it, workers + 1):
                pending.append(pool.submit(generate, lo, hi))
            while pending:
                done = pending.popleft()
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(generate, *nxt))
                yield done.result()

    return TagStream(header, blocks)
