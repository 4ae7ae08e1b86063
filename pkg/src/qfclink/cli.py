"""Command-line interface.

Subcommands: ``simulate`` writes tag files, ``analyze`` turns one into
counts/SBR/pulse-shape tables, ``g2`` computes the windowed cross
correlation, ``fit`` recovers curve parameters from measured points,
``sweep`` tabulates the model across pump power, and ``report`` bundles the
full analysis of one tag file, rendering figures alongside the delimited
output.

Exit codes: 0 success; 2 usage and parse problems (bad flags, bad config,
malformed tag files); 3 data that violates an invariant of the requested
computation; 4 I/O failures.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, model, tagio
from .analysis import WindowSpec
from .sequencer import Channel
from .tagio import ConfigError, Report, ReportTable, TagFileError

__all__ = ["main", "entry", "parse_duration_ns"]

TOOL = "qfclink 0.1.0"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_IO = 4

_UNITS_NS = {"ns": 1.0, "us": 1e3, "ms": 1e6, "s": 1e9, "min": 6e10, "h": 3.6e12}


def parse_duration_ns(text: str) -> float:
    """Parse a duration with a mandatory unit suffix into nanoseconds."""
    m = re.fullmatch(r"([0-9.+\-eE]+)\s*(ns|us|ms|s|min|h)", text.strip())
    if not m:
        raise ConfigError(
            f"duration {text!r} needs a unit suffix: "
            + ", ".join(_UNITS_NS))
    try:
        value = float(m.group(1))
    except ValueError as exc:
        raise ConfigError(f"bad duration value {text!r}") from exc
    if value < 0:
        raise ConfigError(f"duration must be >= 0, got {text!r}")
    return value * _UNITS_NS[m.group(2)]


def _load_config(path: str | None) -> tagio.ExperimentConfig:
    if path is None:
        return tagio.default_config()
    return tagio.load_config(Path(path).read_text())


def _write_report(report: Report, out: str | None) -> None:
    text = report.render()
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _metadata_table(pairs: list[tuple[str, object]]) -> ReportTable:
    return ReportTable("metadata", ["key", "value"],
                       [[k, v] for k, v in pairs])


def _stream_metadata(path: str, cfg: tagio.ExperimentConfig,
                     run: analysis.CollectedRun) -> list[tuple[str, object]]:
    header = run.header
    pairs: list[tuple[str, object]] = [
        ("tool", TOOL),
        ("source", Path(path).name),
        ("attempts", run.attempts),
        ("orphans", run.orphans),
        ("tick_ps", run.tick_ps),
    ]
    if header is not None:
        pairs += [
            ("master_seed", header.master_seed),
            ("file_config_digest", header.config_digest.hex()),
            ("config_digest_match",
             "yes" if header.config_digest == cfg.digest else "no"),
        ]
    return pairs


def _place_windows(cfg: tagio.ExperimentConfig, hist: analysis.Histogram,
                   start_ns: float | None, width_ns: float,
                   delay_ns: float) -> tuple[WindowSpec, WindowSpec]:
    """Signal and noise windows, from flags or from the histogram peak."""
    if start_ns is not None:
        signal = WindowSpec(start_ns=start_ns, width_ns=width_ns)
    else:
        try:
            signal = analysis.place_signal_window(hist, width_ns)
        except ValueError:
            # Empty channel: no peak to anchor on, fall back to the
            # schedule's excitation epoch.
            signal = WindowSpec(
                start_ns=cfg.sequence.excite_offset_ns
                - cfg.sequence.trigger_offset_ns - hist.bin_ns,
                width_ns=width_ns)
    return signal, analysis.noise_window_for(signal, delay_ns)


def _sbr_rows(label: str, signal: WindowSpec, noise: WindowSpec,
              window_total: float, noise_total: float) -> list:
    if noise_total > 0.0:
        res = analysis.sbr(window_total, noise_total)
        value, sigma = f"{res.value:.6g}", f"{res.sigma:.3g}"
    else:
        value, sigma = "undefined", "undefined"
    return [label, signal.start_ns, signal.width_ns, noise.start_ns,
            window_total, noise_total, value, sigma]


def _analysis_bundle(args, run: analysis.CollectedRun,
                     cfg: tagio.ExperimentConfig):
    """Histograms, windows, counts, SBR, and shapes shared by subcommands."""
    bin_ns = args.bin if args.bin is not None else cfg.bin_ns
    width_ns = (args.window_width if args.window_width is not None
                else cfg.signal_window_ns)
    delay_ns = (args.noise_delay if args.noise_delay is not None
                else cfg.noise_delay_ns)

    hists = {ch: analysis.build_histogram(run, ch, bin_ns=bin_ns)
             for ch in (int(Channel.VISIBLE), int(Channel.TELECOM))}
    windows = {}
    for ch, hist in hists.items():
        windows[ch] = _place_windows(cfg, hist, args.window_start,
                                     width_ns, delay_ns)

    counts = {}
    for ch in hists:
        sig, noi = windows[ch]
        counts[ch] = (analysis.window_counts(run, sig, channel=ch),
                      analysis.window_counts(run, noi, channel=ch))
    return bin_ns, hists, windows, counts


def _sbr_table(windows, counts) -> ReportTable:
    rows = []
    for ch, name in ((int(Channel.TELECOM), "telecom"),
                     (int(Channel.VISIBLE), "visible")):
        sig, noi = windows[ch]
        t, n = counts[ch]
        rows.append(_sbr_rows(name, sig, noi, t, n))
    return ReportTable(
        "sbr",
        ["channel", "window_start_ns", "window_width_ns", "noise_start_ns",
         "window_counts", "noise_counts", "sbr", "sbr_sigma"],
        rows)


def _shapes(hists, windows) -> tuple[np.ndarray, dict[str, np.ndarray]] | None:
    shapes = {}
    edges = None
    for ch, name in ((int(Channel.VISIBLE), "visible"),
                     (int(Channel.TELECOM), "telecom")):
        hist = hists[ch]
        _, noise = windows[ch]
        try:
            shapes[name] = analysis.background_subtract_normalize(hist, noise)
        except (analysis.DegenerateShapeError, ValueError):
            return None
        edges = hist.edges_ns
    return edges, shapes


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    duration_s = parse_duration_ns(args.duration) * 1e-9 if args.duration else None
    stream = cfg.simulate(seed=args.seed, attempts=args.attempts,
                          duration_s=duration_s, workers=args.workers,
                          batch_cycles=args.batch_cycles)
    nbytes = tagio.write_tags(stream, args.out)
    if Path(args.out).suffix.lower() != ".csv":
        records = (nbytes - tagio.HEADER_SIZE) // tagio.RECORD_SIZE
        print(f"wrote {records} records ({nbytes} bytes) to {args.out}")
    else:
        print(f"wrote {nbytes} bytes to {args.out}")
    print(f"attempts {stream.header.attempt_count}, seed "
          f"{stream.header.master_seed}, config {cfg.digest.hex()[:12]}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    run = analysis.collect_stream(tagio.read_tags(args.tags))
    bin_ns, hists, windows, counts = _analysis_bundle(args, run, cfg)

    tables = [_metadata_table(_stream_metadata(args.tags, cfg, run)),
              _sbr_table(windows, counts)]

    # Model cross-check of the telecom window at the configured operating
    # point; meaningful when the file was produced under the same config.
    tel_sig, _ = windows[int(Channel.TELECOM)]
    excite_rel_ns = (cfg.sequence.excite_offset_ns
                     - cfg.sequence.trigger_offset_ns)
    t_model, n_model = model.predicted_window_totals(
        cfg.source, "telecom", cfg.telecom_noise_hz, run.attempts,
        tel_sig.start_ns - excite_rel_ns, tel_sig.width_ns)
    model_rows = [
        ["telecom_window_expected_counts", t_model],
        ["telecom_noise_expected_counts", n_model],
        ["capture_fraction_model",
         model.window_capture_fraction(tel_sig.width_ns, cfg.source.tau_ns)],
        ["cascade_throughput", model.cascade_throughput(cfg.cascade)],
    ]
    tables.append(ReportTable("model", ["quantity", "value"], model_rows))

    shapes = _shapes(hists, windows)
    if shapes is not None:
        edges, shape_map = shapes
        overlap = analysis.shape_overlap(shape_map["visible"],
                                         shape_map["telecom"])
        tables.append(ReportTable("summary", ["quantity", "value"],
                                  [["shape_overlap", overlap]]))
        rows = [[float(edges[i]), float(shape_map["visible"][i]),
                 float(shape_map["telecom"][i])]
                for i in range(len(shape_map["visible"]))]
        tables.append(ReportTable(
            "shape", ["bin_start_ns", "visible", "telecom"], rows))

    for ch, name in ((int(Channel.VISIBLE), "visible"),
                     (int(Channel.TELECOM), "telecom")):
        hist = hists[ch]
        tables.append(ReportTable(
            f"histogram_{name}", ["bin_start_ns", "counts"],
            [[float(hist.edges_ns[i]), int(hist.counts[i])]
             for i in range(hist.nbins)]))

    _write_report(Report(TOOL, tables), args.out)
    if args.figures:
        _render_analysis_figures(Path(args.figures), hists, windows, shapes)
    return EXIT_OK


def _render_analysis_figures(outdir: Path, hists, windows, shapes) -> None:
    from . import figures

    outdir.mkdir(parents=True, exist_ok=True)
    figures.save_histogram_figure(list(hists.values()),
                                  outdir / "histogram.png", windows)
    if shapes is not None:
        edges, shape_map = shapes
        figures.save_shapes_figure(edges, shape_map, outdir / "shapes.png")


def cmd_g2(args) -> int:
    cfg = _load_config(args.config)
    run = analysis.collect_stream(tagio.read_tags(args.tags))
    _, hists, windows, counts = _analysis_bundle(args, run, cfg)
    shift = args.shift if args.shift is not None else \
        cfg.sequence.attempts_per_cycle

    result = analysis.g2_cross(
        run,
        window_1=windows[int(Channel.TELECOM)][0],
        window_2=windows[int(Channel.VISIBLE)][0],
        max_n=args.max_n,
        attempts_per_shift=shift,
    )
    g2_zero, g2_sigma = result.zero_shift()

    summary = [
        ["g2_zero", g2_zero],
        ["g2_zero_sigma", g2_sigma],
        ["offpeak_mean", result.offpeak_mean()],
        ["hits_telecom", result.hits_1],
        ["hits_visible", result.hits_2],
        ["attempts", result.attempts],
        ["attempts_per_shift", result.attempts_per_shift],
    ]
    t1, n1 = counts[int(Channel.TELECOM)]
    t2, n2 = counts[int(Channel.VISIBLE)]
    if n1 > 0 and n2 > 0 and run.attempts > 0:
        expected = analysis.expected_g2_zero(
            analysis.CountSummary.from_window_totals(
                t1, n1, t2, n2, run.attempts))
        summary.append(["g2_zero_expected_from_counts", expected])

    tables = [
        _metadata_table(_stream_metadata(args.tags, cfg, run)),
        ReportTable("g2_summary", ["quantity", "value"], summary),
        ReportTable(
            "g2", ["n", "g2", "sigma", "coincidences"],
            [[int(n), float(g), float(s), int(c)]
             for n, g, s, c in zip(result.n_values, result.g2,
                                   result.sigma, result.coincidences)]),
    ]
    _write_report(Report(TOOL, tables), args.out)
    if args.figures:
        from . import figures

        outdir = Path(args.figures)
        outdir.mkdir(parents=True, exist_ok=True)
        figures.save_g2_figure(result, outdir / "g2.png")
    return EXIT_OK


def _read_points(path: str) -> list[tuple[float, ...]]:
    rows: list[tuple[float, ...]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            rows.append(tuple(float(p) for p in parts))
        except ValueError:
            if lineno == 1:  # tolerate a column-header line
                continue
            raise ConfigError(f"{path} line {lineno}: not numeric: {raw!r}")
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return rows


def cmd_fit(args) -> int:
    points = _read_points(args.points)
    if args.law == "sin2":
        curve, rms = model.fit_efficiency_curve(points)
        rows = [["eta0", curve.eta0], ["pm_mw", curve.pm_mw],
                ["weighted_rms", rms]]
    else:
        fit = model.fit_noise_line(points)
        rows = [["slope_hz_per_mw", fit.slope_hz_per_mw],
                ["intercept_hz", fit.intercept_hz],
                ["rms_hz", fit.rms_hz],
                ["flagged", "yes" if fit.flagged else "no"]]
    tables = [_metadata_table([("tool", TOOL), ("law", args.law),
                               ("points", Path(args.points).name),
                               ("n_points", len(points))]),
              ReportTable("fit", ["parameter", "value"], rows)]
    _write_report(Report(TOOL, tables), args.out)
    if args.figures:
        from . import figures

        outdir = Path(args.figures)
        outdir.mkdir(parents=True, exist_ok=True)
        if args.law == "sin2":
            figures.save_efficiency_figure(points, curve,
                                           outdir / "efficiency_fit.png")
        else:
            figures.save_noise_figure(points, fit.slope_hz_per_mw,
                                      fit.intercept_hz, outdir / "noise_fit.png")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    powers = np.linspace(0.0, args.pump_max, args.steps)
    stage1_eff = cfg.stage1.efficiency
    rows = []
    effs = []
    noises = []
    for p in powers:
        eta2 = model.stage_efficiency(float(p), cfg.stage2.curve)
        noise = model.noise_rate(float(p), cfg.stage2.noise)
        effs.append(eta2)
        noises.append(noise)
        rows.append([float(p), eta2, noise,
                     stage1_eff * eta2 * cfg.cascade.interstage_coupling])
    tables = [_metadata_table([("tool", TOOL),
                               ("config_digest", cfg.digest.hex())]),
              ReportTable("sweep",
                          ["pump_mw", "stage2_efficiency",
                           "stage2_noise_hz", "cascade_throughput"], rows)]
    _write_report(Report(TOOL, tables), args.out)
    if args.figures:
        from . import figures

        outdir = Path(args.figures)
        outdir.mkdir(parents=True, exist_ok=True)
        figures.save_sweep_figure(powers, np.array(effs), np.array(noises),
                                  outdir / "sweep.png")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    run = analysis.collect_stream(tagio.read_tags(args.tags))
    bin_ns, hists, windows, counts = _analysis_bundle(args, run, cfg)
    shift = args.shift if args.shift is not None else \
        cfg.sequence.attempts_per_cycle

    tables = [_metadata_table(_stream_metadata(args.tags, cfg, run)),
              _sbr_table(windows, counts)]

    result = None
    try:
        result = analysis.g2_cross(
            run,
            window_1=windows[int(Channel.TELECOM)][0],
            window_2=windows[int(Channel.VISIBLE)][0],
            max_n=args.max_n,
            attempts_per_shift=shift)
    except ValueError:
        tables.append(ReportTable("g2_summary", ["quantity", "value"],
                                  [["g2_zero", "undefined"]]))
    if result is not None:
        g2_zero, g2_sigma = result.zero_shift()
        tables.append(ReportTable(
            "g2_summary", ["quantity", "value"],
            [["g2_zero", g2_zero], ["g2_zero_sigma", g2_sigma],
             ["offpeak_mean", result.offpeak_mean()]]))
        tables.append(ReportTable(
            "g2", ["n", "g2", "sigma", "coincidences"],
            [[int(n), float(g), float(s), int(c)]
             for n, g, s, c in zip(result.n_values, result.g2,
                                   result.sigma, result.coincidences)]))

    shapes = _shapes(hists, windows)
    if shapes is not None:
        edges, shape_map = shapes
        tables.append(ReportTable(
            "summary", ["quantity", "value"],
            [["shape_overlap", analysis.shape_overlap(
                shape_map["visible"], shape_map["telecom"])]]))

    for ch, name in ((int(Channel.VISIBLE), "visible"),
                     (int(Channel.TELECOM), "telecom")):
        hist = hists[ch]
        tables.append(ReportTable(
            f"histogram_{name}", ["bin_start_ns", "counts"],
            [[float(hist.edges_ns[i]), int(hist.counts[i])]
             for i in range(hist.nbins)]))

    _write_report(Report(TOOL, tables), args.out)

    # The report renders its figures next to the delimited output unless
    # told otherwise.
    figdir = None
    if args.figures:
        figdir = Path(args.figures)
    elif not args.no_figures and args.out:
        figdir = Path(args.out).parent / (Path(args.out).stem + "_figures")
    if figdir is not None:
        _render_analysis_figures(figdir, hists, windows, shapes)
        if result is not None:
            from . import figures

            figures.save_g2_figure(result, figdir / "g2.png")
        print(f"figures in {figdir}", file=sys.stderr)
    return EXIT_OK


def _add_window_flags(sub) -> None:
    sub.add_argument("--config", help="configuration file")
    sub.add_argument("--window-start", type=parse_duration_ns, metavar="DUR",
                     help="signal window start after the trigger "
                          "(default: auto from the histogram peak)")
    sub.add_argument("--window-width", type=parse_duration_ns, metavar="DUR",
                     help="signal window width")
    sub.add_argument("--noise-delay", type=parse_duration_ns, metavar="DUR",
                     help="noise window delay after the signal window start")
    sub.add_argument("--bin", type=parse_duration_ns, metavar="DUR",
                     help="histogram bin width")
    sub.add_argument("--out", help="report file (default: stdout)")
    sub.add_argument("--figures", metavar="DIR",
                     help="also render figures into DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfclink",
        description="simulate and analyze time-tag streams of a "
                    "frequency-converted single-photon link")
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="generate a tag file")
    sim.add_argument("--config", help="configuration file")
    sim.add_argument("--seed", type=int, help="override run.seed")
    group = sim.add_mutually_exclusive_group()
    group.add_argument("--attempts", type=int, help="run length in attempts")
    group.add_argument("--duration", metavar="DUR",
                       help="run length in wall-clock time (unit suffix "
                            "required, e.g. 10s, 500ms)")
    sim.add_argument("--out", required=True, help="output tag file "
                     "(.csv for the text twin)")
    sim.add_argument("--workers", type=int, default=1,
                     help="parallel generation workers (output is identical "
                          "for any value)")
    sim.add_argument("--batch-cycles", type=int, default=4096,
                     help=argparse.SUPPRESS)
    sim.set_defaults(func=cmd_simulate)

    ana = subs.add_parser("analyze", help="counts, SBR, and pulse shapes")
    ana.add_argument("tags", help="tag file")
    _add_window_flags(ana)
    ana.set_defaults(func=cmd_analyze)

    g2p = subs.add_parser("g2", help="windowed cross correlation")
    g2p.add_argument("tags", help="tag file")
    _add_window_flags(g2p)
    g2p.add_argument("--max-n", type=int, default=250,
                     help="maximum shift in cycles")
    g2p.add_argument("--shift", type=int,
                     help="attempts per shift unit (default: one cycle)")
    g2p.set_defaults(func=cmd_g2)

    fit = subs.add_parser("fit", help="fit measured curve points")
    fit.add_argument("points", help="CSV of pump_mw,value[,sigma] rows")
    fit.add_argument("--law", choices=("sin2", "line"), default="sin2",
                     help="sin2 efficiency curve or straight noise line")
    fit.add_argument("--out", help="report file (default: stdout)")
    fit.add_argument("--figures", metavar="DIR",
                     help="also render the fit figure into DIR")
    fit.set_defaults(func=cmd_fit)

    swp = subs.add_parser("sweep", help="model curves across pump power")
    swp.add_argument("--config", help="configuration file")
    swp.add_argument("--pump-max", type=float, default=400.0,
                     help="top of the pump power grid, mW")
    swp.add_argument("--steps", type=int, default=81, help="grid points")
    swp.add_argument("--out", help="report file (default: stdout)")
    swp.add_argument("--figures", metavar="DIR",
                     help="also render the sweep figure into DIR")
    swp.set_defaults(func=cmd_sweep)

    rep = subs.add_parser("report", help="full analysis bundle of a tag file")
    rep.add_argument("tags", help="tag file")
    _add_window_flags(rep)
    rep.add_argument("--max-n", type=int, default=250,
                     help="maximum correlation shift in cycles")
    rep.add_argument("--shift", type=int,
                     help="attempts per shift unit (default: one cycle)")
    rep.add_argument("--no-figures", action="store_true",
                     help="skip figure rendering")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, TagFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (model.FitError, ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    raise SystemExit(main())
