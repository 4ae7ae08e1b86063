"""Histogram, window, SBR, correlation, and pulse-shape estimator tests."""

import math

import numpy as np
import pytest

from qfclink import (
    Channel,
    CountSummary,
    DegenerateShapeError,
    DetectorSpec,
    Histogram,
    RunPlan,
    SequenceSpec,
    SourceSpec,
    WindowSpec,
    background_subtract_normalize,
    build_histogram,
    collect_stream,
    expected_g2_zero,
    g2_cross,
    noise_window_for,
    optimize_window,
    place_signal_window,
    sbr,
    shape_overlap,
    simulate_run,
    window_counts,
)
from qfclink.sequencer import TAG_DTYPE, StreamHeader, TagStream

TAU_NS = 13.89


def make_stream(trigger_ticks, tagged, attempt_count=None, tick_ps=80):
    """Stream from explicit trigger ticks plus (channel, ticks) tag pairs."""
    trigger_ticks = np.asarray(trigger_ticks, dtype=np.uint64)
    channels = [np.zeros(len(trigger_ticks), dtype=np.uint8)]
    ticks = [trigger_ticks]
    for channel, t in tagged:
        channels.append(np.full(len(t), channel, dtype=np.uint8))
        ticks.append(np.asarray(t, dtype=np.uint64))
    channels = np.concatenate(channels)
    ticks = np.concatenate(ticks)
    order = np.lexsort((channels, ticks))  # ticks ascending, triggers first on ties
    records = np.zeros(len(ticks), dtype=TAG_DTYPE)
    records["channel"] = channels[order]
    records["ticks"] = ticks[order]
    if attempt_count is None:
        attempt_count = len(trigger_ticks)
    header = StreamHeader(tick_ps=tick_ps, channel_count=3,
                          attempt_count=attempt_count, master_seed=0)
    return TagStream.from_records(header, records)


def quiet_detector(label, jitter_ps=0.0):
    return DetectorSpec(label=label, efficiency=1.0, dark_hz=0.0,
                        jitter_sigma_ps=jitter_ps)


def make_hist(counts, bin_ns=0.8, origin_ns=0.0, attempts=1000):
    counts = np.asarray(counts, dtype=np.int64)
    return Histogram(channel=Channel.VISIBLE, bin_ns=bin_ns, origin_ns=origin_ns,
                     counts=counts, attempts=attempts, orphans=0, tick_ps=80)


def exponential_pulse_counts(scale, noise_per_bin, bin_ns=0.8, range_ns=480.0,
                             start_ns=200.0, tau_ns=TAU_NS):
    """Expected-value counts: flat floor plus an exponential decay from start_ns."""
    edges = np.arange(0.0, range_ns + bin_ns, bin_ns)
    lo = np.maximum(edges[:-1] - start_ns, 0.0)
    hi = np.maximum(edges[1:] - start_ns, 0.0)
    mass = np.exp(-lo / tau_ns) - np.exp(-hi / tau_ns)
    mass[edges[1:] <= start_ns] = 0.0
    return np.round(scale * mass).astype(np.int64) + int(round(noise_per_bin))


# --- histograms ---------------------------------------------------------


def test_histogram_places_tags_in_expected_bin():
    # three tags 5 ns after the trigger land together in bin 5 of a 1 ns grid
    trig = 1_000_000
    stream = make_stream([trig], [(Channel.VISIBLE, [trig + 63] * 3)])
    hist = build_histogram(stream, Channel.VISIBLE, bin_ns=1.0, range_ns=(0.0, 10.0))
    assert hist.nbins == 10
    assert hist.counts[5] == 3
    assert hist.total == 3
    assert hist.attempts == 1


def test_histogram_edge_tag_goes_to_upper_bin():
    # rel = 10 ticks = 0.8 ns sits exactly on the first edge of bin 1
    stream = make_stream([1000], [(Channel.VISIBLE, [1010])])
    hist = build_histogram(stream, Channel.VISIBLE, bin_ns=0.8, range_ns=(0.0, 8.0))
    assert hist.counts[0] == 0
    assert hist.counts[1] == 1


def test_histogram_orphans_and_out_of_range():
    # one tag before any trigger, one beyond the range: neither is binned
    stream = make_stream([1000], [(Channel.VISIBLE, [500, 1010, 1000 + 200])])
    hist = build_histogram(stream, Channel.VISIBLE, bin_ns=0.8, range_ns=(0.0, 8.0))
    assert hist.orphans == 1
    assert hist.total == 1


def test_histogram_validation():
    stream = make_stream([1000], [(Channel.VISIBLE, [1010])])
    with pytest.raises(ValueError):
        build_histogram(stream, Channel.VISIBLE, range_ns=(10.0, 10.0))
    with pytest.raises(ValueError):
        build_histogram(stream, Channel.VISIBLE, bin_ns=0.0)
    with pytest.raises(ValueError):
        build_histogram(stream, Channel.VISIBLE, bin_ns=100.0, range_ns=(0.0, 10.0))


def test_histogram_captures_exponential_mass():
    # synthetic exponential delays: mass inside one lifetime-derived window
    rng = np.random.default_rng(5)
    n = 1_000_000
    trig = 10_000_000
    delays_ns = rng.exponential(TAU_NS, n)
    ticks = trig + np.round(delays_ns * 12.5).astype(np.uint64)
    stream = make_stream([trig], [(Channel.TELECOM, np.sort(ticks))])
    hist = build_histogram(stream, Channel.TELECOM, bin_ns=0.8, range_ns=(0.0, 1400.0))
    captured = window_counts(hist, WindowSpec(start_ns=0.0, width_ns=41.6))
    expect = 1.0 - math.exp(-41.6 / TAU_NS)
    sigma = math.sqrt(expect * (1.0 - expect) / n)
    assert abs(captured / n - expect) < 4.0 * sigma + 1e-4


# --- window counting -----------------------------------------------------


def test_window_counts_exact_on_tags():
    # [0.8, 1.6) ns maps to ticks [10, 20): half-open on the tick grid
    trig = 1000
    stream = make_stream(
        [trig], [(Channel.VISIBLE, [trig + 9, trig + 10, trig + 19, trig + 20])]
    )
    run = collect_stream(stream)
    w = WindowSpec(start_ns=0.8, width_ns=0.8)
    assert window_counts(run, w, channel=Channel.VISIBLE) == 2.0
    assert window_counts(stream, WindowSpec(start_ns=5000.0, width_ns=1.0),
                         channel=Channel.VISIBLE) == 0.0


def test_window_counts_requires_channel_on_tags():
    stream = make_stream([1000], [(Channel.VISIBLE, [1010])])
    with pytest.raises(ValueError):
        window_counts(collect_stream(stream), WindowSpec(start_ns=0.0, width_ns=1.0))


def test_window_counts_prorates_partial_bins():
    hist = make_hist([4, 8], bin_ns=1.0)
    assert window_counts(hist, WindowSpec(start_ns=1.0, width_ns=0.5)) == pytest.approx(4.0)
    assert window_counts(hist, WindowSpec(start_ns=0.5, width_ns=1.0)) == pytest.approx(6.0)
    assert window_counts(hist, WindowSpec(start_ns=5.0, width_ns=1.0)) == 0.0


def test_window_partition_conserves_total():
    rng = np.random.default_rng(7)
    hist = make_hist(rng.integers(0, 50, size=64))
    starts = np.linspace(0.0, 64 * 0.8, 9)
    parts = [
        window_counts(hist, WindowSpec(start_ns=a, width_ns=b - a))
        for a, b in zip(starts[:-1], starts[1:])
    ]
    assert sum(parts) == pytest.approx(hist.total, abs=1e-9)


def test_window_counts_hist_matches_exact_for_aligned_windows():
    seq = SequenceSpec()
    src = SourceSpec(tau_ns=TAU_NS, p_visible_window=8.25e-4,
                     p_telecom_window=2.545e-4)
    stream = simulate_run(seq, RunPlan(master_seed=7, attempts=100_000), src,
                          quiet_detector("pmt"), quiet_detector("snspd"),
                          visible_noise_hz=857.0, telecom_noise_hz=56.0)
    run = collect_stream(stream)
    hist = build_histogram(run, Channel.VISIBLE)
    w = WindowSpec(start_ns=199.2, width_ns=41.6)
    assert window_counts(hist, w) == pytest.approx(
        window_counts(run, w, channel=Channel.VISIBLE), abs=1e-6)


# --- collection ----------------------------------------------------------


def test_collect_stream_assigns_attempts_across_blocks():
    # trigger in one block, its tag in the next: ownership carries over
    header = StreamHeader(tick_ps=80, channel_count=3, attempt_count=2,
                          master_seed=0)
    first = np.zeros(2, dtype=TAG_DTYPE)
    first["channel"] = [0, 1]
    first["ticks"] = [1000, 1063]
    second = np.zeros(2, dtype=TAG_DTYPE)
    second["channel"] = [1, 0]
    second["ticks"] = [1100, 5000]
    stream = TagStream(header, lambda: iter([first, second]))
    run = collect_stream(stream)
    assert run.attempts == 2
    assert run.orphans == 0
    idx, rel = run.select(Channel.VISIBLE)
    assert idx.tolist() == [0, 0]
    assert rel.tolist() == [63, 100]


def test_collect_stream_counts_orphans():
    stream = make_stream([1000], [(Channel.TELECOM, [10, 900, 1050])])
    run = collect_stream(stream)
    assert run.orphans == 2
    _, rel = run.select(Channel.TELECOM)
    assert rel.tolist() == [50]


def test_collect_stream_rejects_attempt_mismatch():
    stream = make_stream([1000, 2000, 3000], [], attempt_count=5)
    with pytest.raises(ValueError):
        collect_stream(stream)


# --- SBR and expected g2 -------------------------------------------------

# Window totals implied by the default operating point over 1.54e9 attempts:
# signal = attempts * in-window probability, noise = attempts * rate * 41.6 ns.
R_ATTEMPTS = 1.54e9
C1S = R_ATTEMPTS * 2.545e-4     # telecom signal
C1N = R_ATTEMPTS * 56.0 * 41.6e-9
C2S = R_ATTEMPTS * 8.25e-4      # visible signal
C2N = R_ATTEMPTS * 857.0 * 41.6e-9


def test_sbr_telecom_operating_point():
    result = sbr(C1S + C1N, C1N)
    assert result.value == pytest.approx(109.24622252747253, rel=1e-12)
    assert result.sigma == pytest.approx(1.8489427164390388, rel=1e-12)


def test_sbr_visible_operating_point():
    result = sbr(C2S + C2N, C2N)
    assert result.value == pytest.approx(23.140876043443136, rel=1e-12)
    assert result.sigma == pytest.approx(0.10514031642832629, rel=1e-12)


def test_sbr_scaling():
    # the ratio is scale free; the error shrinks with sqrt(counts)
    a = sbr(1200.0, 60.0)
    b = sbr(1200.0 * 25.0, 60.0 * 25.0)
    assert b.value == pytest.approx(a.value, rel=1e-12)
    assert b.sigma == pytest.approx(a.sigma / 5.0, rel=1e-12)


def test_sbr_rejects_bad_counts():
    with pytest.raises(ValueError):
        sbr(100.0, 0.0)
    with pytest.raises(ValueError):
        sbr(-1.0, 10.0)


def test_expected_g2_zero_operating_point():
    counts = CountSummary(telecom_signal=C1S, telecom_noise=C1N,
                          visible_signal=C2S, visible_noise=C2N,
                          attempts=R_ATTEMPTS)
    value = expected_g2_zero(counts)
    assert value == pytest.approx(0.05049412301701194, rel=1e-12)
    by_hand = (C1S * C2N + C1N * C2S + 2.0 * C1N * C2N) / ((C1S + C1N) * (C2S + C2N))
    assert value == pytest.approx(by_hand, rel=1e-12)


def test_expected_g2_zero_limits():
    clean = CountSummary(telecom_signal=100.0, telecom_noise=0.0,
                         visible_signal=400.0, visible_noise=0.0, attempts=1e6)
    assert expected_g2_zero(clean) == 0.0
    noise_only = CountSummary(telecom_signal=0.0, telecom_noise=70.0,
                              visible_signal=0.0, visible_noise=900.0, attempts=1e6)
    assert expected_g2_zero(noise_only) == pytest.approx(2.0, rel=1e-12)
    mixed = CountSummary(telecom_signal=C1S, telecom_noise=C1N,
                         visible_signal=C2S, visible_noise=C2N, attempts=R_ATTEMPTS)
    scaled = CountSummary(telecom_signal=C1S * 3.0, telecom_noise=C1N * 3.0,
                          visible_signal=C2S * 3.0, visible_noise=C2N * 3.0,
                          attempts=R_ATTEMPTS * 3.0)
    assert expected_g2_zero(scaled) == pytest.approx(expected_g2_zero(mixed), rel=1e-12)


def test_count_summary_clamps_and_totals():
    counts = CountSummary.from_window_totals(
        telecom_total=90.0, telecom_noise=100.0,
        visible_total=500.0, visible_noise=20.0, attempts=1000)
    assert counts.telecom_signal == 0.0
    assert counts.visible_signal == 480.0
    assert counts.telecom_total == pytest.approx(100.0)
    assert counts.visible_total == pytest.approx(500.0)


# --- cross correlation ---------------------------------------------------


def test_g2_cross_counts_hand_built_coincidences():
    # 20 attempts, 5 per shift; hits: telecom {3, 13}, visible {3, 8}
    triggers = 1000 + 10_000 * np.arange(20, dtype=np.uint64)
    tel = [triggers[3] + 625, triggers[13] + 625]
    vis = [triggers[3] + 625, triggers[8] + 625]
    stream = make_stream(triggers, [(Channel.TELECOM, tel), (Channel.VISIBLE, vis)])
    w = WindowSpec(start_ns=0.0, width_ns=100.0)
    result = g2_cross(stream, w, w, max_n=2, attempts_per_shift=5)
    assert result.n_values.tolist() == [-2, -1, 0, 1, 2]
    # pairs (tel i, vis i + 5n): n=-2 (13,3), n=-1 (13,8), n=0 (3,3), n=1 (3,8)
    assert result.coincidences.tolist() == [1, 1, 1, 1, 0]
    assert result.hits_1 == 2 and result.hits_2 == 2
    # normalization: hits_1 * hits_2 / attempts = 0.2
    assert result.g2.tolist() == [5.0, 5.0, 5.0, 5.0, 0.0]
    value, sigma = result.zero_shift()
    assert value == 5.0
    assert sigma == pytest.approx(5.0)
    assert result.offpeak_mean() == pytest.approx(3.75)


def test_g2_cross_double_hit_attempt_counts_once():
    # two in-window tags on one attempt still flag a single hit
    triggers = 1000 + 10_000 * np.arange(4, dtype=np.uint64)
    tel = [triggers[1] + 100, triggers[1] + 200]
    vis = [triggers[1] + 150]
    stream = make_stream(triggers, [(Channel.TELECOM, tel), (Channel.VISIBLE, vis)])
    w = WindowSpec(start_ns=0.0, width_ns=100.0)
    result = g2_cross(stream, w, w, max_n=1, attempts_per_shift=1)
    assert result.hits_1 == 1
    assert result.coincidences.tolist() == [0, 1, 0]


def test_g2_cross_validation():
    triggers = 1000 + 10_000 * np.arange(4, dtype=np.uint64)
    stream = make_stream(triggers, [(Channel.TELECOM, [triggers[0] + 10])])
    w = WindowSpec(start_ns=0.0, width_ns=100.0)
    with pytest.raises(ValueError):
        g2_cross(stream, w, w)  # no visible hits at all
    both = make_stream(triggers, [(Channel.TELECOM, [triggers[0] + 10]),
                                  (Channel.VISIBLE, [triggers[1] + 10])])
    with pytest.raises(ValueError):
        g2_cross(both, w, w, max_n=-1)
    with pytest.raises(ValueError):
        g2_cross(both, w, w, attempts_per_shift=0)


def test_g2_cross_uncorrelated_noise_normalizes_to_one():
    # flat 50 kHz on both channels: every shift should sit at 1
    seq = SequenceSpec()
    src = SourceSpec(tau_ns=TAU_NS, p_visible_window=0.0, p_telecom_window=0.0)
    stream = simulate_run(seq, RunPlan(master_seed=33, attempts=4_000_000), src,
                          quiet_detector("pmt"), quiet_detector("snspd"),
                          visible_noise_hz=50_000.0, telecom_noise_hz=50_000.0)
    run = collect_stream(stream)
    w = WindowSpec(start_ns=0.0, width_ns=5000.0)
    result = g2_cross(run, w, w, max_n=20)
    value, sigma = result.zero_shift()
    assert abs(value - 1.0) < 0.02
    assert 0.0 < sigma < 0.01
    assert abs(result.offpeak_mean() - 1.0) < 0.01
    assert np.all(result.g2 > 0.97) and np.all(result.g2 < 1.03)


def test_g2_cross_single_photon_source_antibunches():
    # one photon per attempt at most: the channels never coincide, so the
    # zero-shift correlation is exactly zero while off-peak shifts stay at 1
    seq = SequenceSpec()
    src = SourceSpec(tau_ns=TAU_NS, p_visible_window=8.25e-4,
                     p_telecom_window=2.545e-4)
    stream = simulate_run(seq, RunPlan(master_seed=23, attempts=30_000_000), src,
                          quiet_detector("pmt"), quiet_detector("snspd"),
                          visible_noise_hz=0.0, telecom_noise_hz=0.0)
    run = collect_stream(stream)
    w = WindowSpec(start_ns=199.2, width_ns=41.6)
    result = g2_cross(run, w, w, max_n=250)
    value, sigma = result.zero_shift()
    assert value == 0.0
    assert sigma > 0.0
    assert abs(result.offpeak_mean() - 1.0) < 0.1
    assert result.hits_1 > 5000 and result.hits_2 > 15000


# --- pulse shapes --------------------------------------------------------


def test_background_subtract_recovers_decay_constant():
    counts = exponential_pulse_counts(20_000.0, 7.0)
    hist = make_hist(counts)
    shape = background_subtract_normalize(
        hist, WindowSpec(start_ns=420.0, width_ns=41.6))
    assert shape.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(shape >= 0.0)
    assert np.all(shape[: int(200.0 / 0.8)] == 0.0)  # floor removed exactly
    centers = hist.edges_ns[:-1] + 0.4
    sel = (centers >= 208.0) & (centers <= 256.0) & (shape > 0.0)
    slope = np.polyfit(centers[sel], np.log(shape[sel]), 1)[0]
    assert -1.0 / slope == pytest.approx(TAU_NS, rel=0.02)


def test_background_subtract_flat_histogram_is_degenerate():
    hist = make_hist(np.full(600, 9, dtype=np.int64))
    with pytest.raises(DegenerateShapeError):
        background_subtract_normalize(hist, WindowSpec(start_ns=400.0, width_ns=41.6))


def test_background_subtract_window_must_fit():
    hist = make_hist(exponential_pulse_counts(1000.0, 2.0))
    with pytest.raises(ValueError):
        background_subtract_normalize(hist, WindowSpec(start_ns=470.0, width_ns=41.6))


def test_shape_overlap_bounds():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    b = np.array([0.0, 0.0, 0.5, 0.5])
    assert shape_overlap(a, a) == pytest.approx(1.0)
    assert shape_overlap(a, b) == pytest.approx(0.0)
    c = np.array([0.25, 0.25, 0.25, 0.25])
    assert shape_overlap(a, c) == pytest.approx(shape_overlap(c, a))
    assert 0.0 < shape_overlap(a, c) < 1.0
    with pytest.raises(ValueError):
        shape_overlap(a, np.array([1.0]))


def test_shape_overlap_of_simulated_channels():
    # the telecom pulse keeps the visible channel's shape through conversion
    seq = SequenceSpec()
    src = SourceSpec(tau_ns=TAU_NS, p_visible_window=8.25e-4,
                     p_telecom_window=2.545e-4)
    stream = simulate_run(seq, RunPlan(master_seed=41, attempts=8_000_000), src,
                          quiet_detector("pmt"), quiet_detector("snspd", 80.0),
                          visible_noise_hz=857.0, telecom_noise_hz=56.0)
    run = collect_stream(stream)
    noise_w = WindowSpec(start_ns=499.2, width_ns=41.6)
    shapes = []
    for channel in (Channel.VISIBLE, Channel.TELECOM):
        hist = build_histogram(run, channel, bin_ns=6.4, range_ns=(180.0, 560.0))
        shapes.append(background_subtract_normalize(hist, noise_w))
    assert shape_overlap(*shapes) > 0.95


# --- window placement and optimization -----------------------------------


def test_place_signal_window_one_bin_before_edge():
    counts = exponential_pulse_counts(50_000.0, 0.0)
    hist = make_hist(counts)
    window = place_signal_window(hist, 41.6)
    assert window.start_ns == pytest.approx(199.2)
    assert window.width_ns == 41.6
    with pytest.raises(ValueError):
        place_signal_window(make_hist(np.zeros(10, dtype=np.int64)), 41.6)


def test_noise_window_for_trails_signal():
    signal = WindowSpec(start_ns=199.2, width_ns=41.6)
    noise = noise_window_for(signal, delay_ns=300.0)
    assert noise.start_ns == pytest.approx(499.2)
    assert noise.width_ns == 41.6
    with pytest.raises(ValueError):
        noise_window_for(signal, delay_ns=20.0)


def brute_force_best(hist, noise_per_bin, criterion, sbr_floor=None):
    counts = hist.counts.astype(float)
    best_key, best = None, None
    for width in range(1, hist.nbins + 1):
        for start in range(0, hist.nbins - width + 1):
            total = counts[start:start + width].sum()
            background = noise_per_bin * width
            ratio = (total - background) / background
            if criterion == "max_sbr":
                key = (ratio, -width, -start)
            else:
                if ratio < sbr_floor:
                    continue
                key = (total - background, -width, -start)
            if best_key is None or key > best_key:
                best_key, best = key, (start, width)
    return best


def test_optimize_window_matches_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(6):
        counts = rng.integers(0, 6, size=30)
        peak = int(rng.integers(5, 20))
        counts[peak:peak + 4] += rng.integers(20, 80, size=4)
        hist = make_hist(counts)
        for criterion, floor in (("max_sbr", None),
                                 ("max_capture_at_sbr_floor", 2.0)):
            window = optimize_window(hist, 3.0, criterion=criterion,
                                     sbr_floor=floor)
            got = (int(round(window.start_ns / hist.bin_ns)),
                   int(round(window.width_ns / hist.bin_ns)))
            assert got == brute_force_best(hist, 3.0, criterion, floor)


def test_optimize_window_zero_noise_takes_widest():
    hist = make_hist(exponential_pulse_counts(1000.0, 0.0))
    window = optimize_window(hist, 0.0)
    assert window.start_ns == pytest.approx(0.0)
    assert window.width_ns == pytest.approx(hist.nbins * hist.bin_ns)
    capped = optimize_window(hist, 0.0, max_width_ns=8.0)
    assert capped.width_ns == pytest.approx(8.0)


def test_optimize_window_width_shrinks_as_noise_rises():
    widths = []
    for noise in (5.0, 100.0, 500.0, 2000.0):
        hist = make_hist(exponential_pulse_counts(1.0e6, noise))
        window = optimize_window(hist, noise,
                                 criterion="max_capture_at_sbr_floor",
                                 sbr_floor=25.0)
        assert window.start_ns == pytest.approx(200.0)
        widths.append(window.width_ns)
    assert all(a >= b for a, b in zip(widths, widths[1:]))
    assert widths[0] > widths[-1]


def test_optimize_window_validation():
    hist = make_hist(exponential_pulse_counts(1000.0, 5.0))
    with pytest.raises(ValueError):
        optimize_window(hist, 5.0, criterion="sharpest")
    with pytest.raises(ValueError):
        optimize_window(hist, -1.0)
    with pytest.raises(ValueError):
        optimize_window(hist, 5.0, criterion="max_capture_at_sbr_floor")
    with pytest.raises(ValueError):
        optimize_window(hist, 5.0, criterion="max_capture_at_sbr_floor",
                        sbr_floor=1e9)
    flat = make_hist(np.full(20, 4, dtype=np.int64))
    with pytest.raises(ValueError):
        optimize_window(flat, 10.0)
