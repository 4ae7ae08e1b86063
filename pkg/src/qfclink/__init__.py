"""Simulator and analysis toolkit for a frequency-converted photon source.

The package models a pulsed single-photon source whose emission is
frequency-converted to the telecom O-band in two cascaded stages, generates
deterministic time-tag streams of such runs, and recovers the standard
figures of merit (window counts, signal-to-background, pulse shapes, cross
correlations) from those streams or from recorded tag files.
"""

from .analysis import (
    CollectedRun,
    CorrelationResult,
    CountSummary,
    DegenerateShapeError,
    Histogram,
    SbrResult,
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
    window_counts,
)
from .model import (
    CascadeSpec,
    DetectorSpec,
    EfficiencyCurve,
    FitError,
    LinearFit,
    NoiseLine,
    SourceSpec,
    StageSpec,
    cascade_throughput,
    channel_window_probability,
    fit_efficiency_curve,
    fit_noise_line,
    noise_rate,
    predicted_window_totals,
    stage_efficiency,
    window_capture_fraction,
)
from .sequencer import (
    TAG_DTYPE,
    Channel,
    RunPlan,
    ScheduleSummary,
    SequenceSpec,
    StreamHeader,
    TagStream,
    build_schedule,
    simulate_run,
    split_seed,
)
from .tagio import (
    ConfigError,
    ExperimentConfig,
    Report,
    ReportTable,
    TagFileError,
    config_digest,
    default_config,
    load_config,
    read_tags,
    write_tags,
)

__version__ = "0.1.0"
