"""Tag-file formats, run configuration, and delimited reports.

Binary tag files carry a fixed 59-byte header followed by packed 9-byte
records; a CSV twin holds the same information in text form for debugging.
Run configuration is a flat ``key = value`` text format with a closed key
set; its SHA-256 digest is stamped into every tag file so analysis results
can be traced back to the exact configuration that produced them.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    CascadeSpec,
    DetectorSpec,
    EfficiencyCurve,
    NoiseLine,
    SourceSpec,
    StageSpec,
)
from .sequencer import (
    TAG_DTYPE,
    RunPlan,
    SequenceSpec,
    StreamHeader,
    TagStream,
    simulate_run,
)

__all__ = [
    "TagFileError",
    "ConfigError",
    "MAGIC",
    "FORMAT_VERSION",
    "HEADER_SIZE",
    "RECORD_SIZE",
    "write_tags",
    "read_tags",
    "ExperimentConfig",
    "load_config",
    "default_config",
    "config_digest",
    "DEFAULTS",
    "Report",
    "ReportTable",
]

MAGIC = b"QTAG"
FORMAT_VERSION = 1

# magic, version, tick_ps, channel_count, attempt_count, master_seed, digest
_HEADER = struct.Struct("<4sHIBQQ32s")
HEADER_SIZE = _HEADER.size  # 4 + 2 + 4 + 1 + 8 + 8 + 32 = 59 bytes
RECORD_SIZE = TAG_DTYPE.itemsize  # 9 bytes

_READ_CHUNK_RECORDS = 1 << 20


class TagFileError(ValueError):
    """A tag file is malformed; carries where the damage was found."""

    def __init__(self, message: str, *, byte_offset: int | None = None,
                 record_index: int | None = None):
        where = []
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        if record_index is not None:
            where.append(f"record {record_index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.byte_offset = byte_offset
        self.record_index = record_index


class ConfigError(ValueError):
    """A run configuration failed to parse or violates an invariant."""


def _pack_header(header: StreamHeader) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, header.tick_ps,
                        header.channel_count, header.attempt_count,
                        header.master_seed, header.config_digest)


def _unpack_header(raw: bytes, where: str) -> StreamHeader:
    if len(raw) < HEADER_SIZE:
        raise TagFileError(f"{where}: truncated header", byte_offset=len(raw))
    magic, version, tick_ps, channel_count, attempt_count, master_seed, digest = \
        _HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise TagFileError(f"{where}: bad magic {magic!r}", byte_offset=0)
    if version != FORMAT_VERSION:
        raise TagFileError(
            f"{where}: unsupported format version {version}", byte_offset=4)
    try:
        return StreamHeader(tick_ps=tick_ps, channel_count=channel_count,
                            attempt_count=attempt_count,
                            master_seed=master_seed, config_digest=digest)
    except ValueError as exc:
        raise TagFileError(f"{where}: invalid header field: {exc}") from exc


class _OrderCheck:
    """Running verification that records leave in stream order."""

    def __init__(self):
        self.last_tick = -1
        self.index = 0
        self.triggers = 0

    def feed(self, block: np.ndarray, channel_count: int) -> None:
        if not len(block):
            return
        ticks = block["ticks"].astype(np.int64)
        if ticks[0] < self.last_tick or np.any(np.diff(ticks) < 0):
            jumps = np.nonzero(np.diff(np.concatenate(
                ([self.last_tick], ticks))) < 0)[0]
            raise TagFileError("records out of tick order",
                               record_index=self.index + int(jumps[0]))
        bad = block["channel"] >= channel_count
        if np.any(bad):
            raise TagFileError(
                f"channel id {int(block['channel'][bad][0])} outside the "
                f"header's {channel_count} channels",
                record_index=self.index + int(np.nonzero(bad)[0][0]))
        self.last_tick = int(ticks[-1])
        self.triggers += int(np.count_nonzero(block["channel"] == 0))
        self.index += len(block)

    def finish(self, attempt_count: int, error_cls=ValueError) -> None:
        if self.triggers != attempt_count:
            raise error_cls(
                f"stream carries {self.triggers} trigger records but its "
                f"header promises {attempt_count} attempts")


def write_tags(stream: TagStream, path: str | Path) -> int:
    """Write a tag stream to ``path``; returns the byte count written.

    The format is chosen by suffix: ``.csv`` writes the text twin, anything
    else the packed binary form. Refuses to write streams that violate tick
    ordering or whose trigger count disagrees with the header.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _write_csv(stream, path)
    check = _OrderCheck()
    written = 0
    with open(path, "wb") as fh:
        fh.write(_pack_header(stream.header))
        written += HEADER_SIZE
        for block in stream.blocks():
            check.feed(block, stream.header.channel_count)
            buf = np.ascontiguousarray(block, dtype=TAG_DTYPE).tobytes()
            fh.write(buf)
            written += len(buf)
    check.finish(stream.header.attempt_count)
    return written


def _write_csv(stream: TagStream, path: Path) -> int:
    check = _OrderCheck()
    written = 0
    with open(path, "w", newline="") as fh:
        head = stream.header
        lines = [
            f"# format=qtag-csv v{FORMAT_VERSION}",
            f"# tick_ps={head.tick_ps}",
            f"# channel_count={head.channel_count}",
            f"# attempt_count={head.attempt_count}",
            f"# master_seed={head.master_seed}",
            f"# config_digest={head.config_digest.hex()}",
            "channel,ticks",
        ]
        written += fh.write("\n".join(lines) + "\n")
        for block in stream.blocks():
            check.feed(block, head.channel_count)
            body = io.StringIO()
            np.savetxt(body, np.column_stack(
                (block["channel"].astype(np.uint64), block["ticks"])),
                fmt="%d", delimiter=",")
            written += fh.write(body.getvalue())
    check.finish(stream.header.attempt_count)
    return written


def read_tags(path: str | Path) -> TagStream:
    """Open a tag file (binary or CSV by suffix) as a lazy TagStream.

    The header is validated eagerly. Records are streamed in chunks on
    iteration, with tick ordering and channel range checked as they pass;
    so a torn or disordered file fails at the damaged record, not before.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        header = _unpack_header(fh.read(HEADER_SIZE), str(path))
    body = size - HEADER_SIZE
    if body % RECORD_SIZE:
        raise TagFileError(
            f"{path}: {body} record bytes is not a whole number of "
            f"{RECORD_SIZE}-byte records",
            byte_offset=size, record_index=body // RECORD_SIZE)

    def blocks():
        check = _OrderCheck()
        with open(path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            while True:
                raw = fh.read(_READ_CHUNK_RECORDS * RECORD_SIZE)
                if not raw:
                    break
                block = np.frombuffer(raw, dtype=TAG_DTYPE)
                check.feed(block, header.channel_count)
                yield block
        check.finish(header.attempt_count, TagFileError)

    return TagStream(header, blocks)


def _read_csv(path: Path) -> TagStream:
    meta: dict[str, str] = {}
    data_lines: list[str] | None = None
    with open(path) as fh:
        for i, raw in enumerate(fh):
            line = raw.strip()
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            if line == "channel,ticks":
                data_lines = fh.readlines()
                break
            raise TagFileError(f"{path}: expected 'channel,ticks' column "
                               f"header, got {line!r}")
    if data_lines is None:
        raise TagFileError(f"{path}: no column header found")
    try:
        header = StreamHeader(
            tick_ps=int(meta["tick_ps"]),
            channel_count=int(meta["channel_count"]),
            attempt_count=int(meta["attempt_count"]),
            master_seed=int(meta["master_seed"]),
            config_digest=bytes.fromhex(meta["config_digest"]),
        )
    except KeyError as exc:
        raise TagFileError(f"{path}: missing header line {exc}") from exc
    except ValueError as exc:
        raise TagFileError(f"{path}: invalid header value: {exc}") from exc
    try:
        table = np.loadtxt(data_lines, delimiter=",", dtype=np.uint64, ndmin=2)
    except ValueError as exc:
        raise TagFileError(f"{path}: malformed record line: {exc}") from exc

    records = np.empty(len(table), dtype=TAG_DTYPE)
    if len(table):
        if np.any(table[:, 0] > 255):
            raise TagFileError(f"{path}: channel id does not fit in one byte")
        records["channel"] = table[:, 0]
        records["ticks"] = table[:, 1]

    def blocks():
        check = _OrderCheck()
        check.feed(records, header.channel_count)
        check.finish(header.attempt_count, TagFileError)
        yield records

    return TagStream(header, blocks)


# --- run configuration ------------------------------------------------------

def _positive(x: float) -> bool:
    return x > 0.0


def _non_negative(x: float) -> bool:
    return x >= 0.0


def _fraction(x: float) -> bool:
    return 0.0 <= x <= 1.0


# key -> (parser, default, validator, description)
DEFAULTS: dict[str, tuple] = {
    "source.tau_ns": (float, 13.89, _positive, "emission decay constant, ns"),
    "source.p_pmt_window": (float, 8.25e-4, _fraction,
                            "per-attempt in-window click probability, visible arm"),
    "source.p_snspd_window": (float, 2.545e-4, _fraction,
                              "per-attempt in-window click probability, telecom arm"),
    "source.pol_split": (float, 0.5, _fraction,
                         "fraction of emission in the converted polarization"),
    "seq.cooling_us": (float, 100.0, _positive, "cooling period per cycle, us"),
    "seq.attempts_per_cycle": (int, 500, lambda v: v >= 1, "attempts per cycle"),
    "seq.attempt_us": (float, 10.0, _positive, "attempt period, us"),
    "seq.pump_us": (float, 8.0, _positive, "state-preparation pump, us"),
    "seq.delay_ns": (float, 600.0, _positive, "pump-to-trigger delay, ns"),
    "seq.trigger_ns": (float, 200.0, _positive, "trigger pulse, ns"),
    "seq.excite_ns": (float, 200.0, _positive, "excitation pulse, ns"),
    "seq.dead_time_us": (float, 0.0, _non_negative,
                         "idle tail after the last attempt of a cycle, us"),
    "stage1.eta": (float, 0.35, _fraction, "first-stage external efficiency"),
    "stage1.pump_mw": (float, 180.0, _non_negative, "first-stage pump power, mW"),
    "stage2.eta0": (float, 0.356, _fraction, "second-stage peak efficiency"),
    "stage2.pm_mw": (float, 278.0, _positive, "second-stage peak pump power, mW"),
    "stage2.pump_mw": (float, 278.0, _non_negative,
                       "second-stage operating pump power, mW"),
    "stage2.noise_slope_hz_per_mw": (float, 0.036, _non_negative,
                                     "pump-induced noise slope at the SNSPD"),
    "stage2.filter_transmission": (float, 0.69, lambda v: 0.0 < v <= 1.0,
                                   "post-stage filter transmission (reference "
                                   "only; already inside stage2.eta0)"),
    "coupling.interstage": (float, 0.883, lambda v: 0.0 < v <= 1.0,
                            "fiber coupling between the stages"),
    "pmt.bg_hz": (float, 857.0, _non_negative, "visible-channel background rate"),
    "snspd.eff": (float, 0.87, _fraction, "telecom detector efficiency"),
    "snspd.dark_hz": (float, 60.0, _non_negative, "telecom detector dark rate"),
    "snspd.extra_noise_hz": (float, -4.0, lambda v: True,
                             "additive correction to the telecom noise rate; "
                             "the default lands the effective total at 56 Hz"),
    "snspd.jitter_ps": (float, 80.0, _non_negative, "telecom timing jitter, 1-sigma"),
    "pmt.jitter_ps": (float, 0.0, _non_negative, "visible timing jitter, 1-sigma"),
    "window.signal_ns": (float, 41.6, _positive, "signal window width, ns"),
    "window.noise_delay_ns": (float, 300.0, _positive,
                              "noise window delay after the signal window, ns"),
    "analysis.bin_ns": (float, 0.8, _positive, "histogram bin width, ns"),
    "noise.gated": (bool, False, lambda v: True,
                    "confine noise to the attempt region of each cycle"),
    "run.seed": (int, 1, lambda v: 0 <= v < 2**64, "master seed"),
    "run.attempts": (int, None, lambda v: v >= 0, "run length in attempts"),
    "run.duration_s": (float, None, _positive, "run length in seconds"),
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not eq or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in DEFAULTS:
            known = ", ".join(sorted(DEFAULTS))
            raise ConfigError(f"line {lineno}: unknown key {key!r}; "
                              f"known keys: {known}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _, validator, _ = DEFAULTS[key]
        try:
            parsed = _parse_bool(value) if parser is bool else parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        if not validator(parsed):
            raise ConfigError(f"line {lineno}: {key} = {parsed} is out of range")
        values[key] = parsed
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run configuration.

    Built by :func:`load_config`; every value has passed its range check and
    the cross-field invariants. ``digest`` is the SHA-256 of the exact
    configuration text, carried into tag files written from this config.
    """

    source: SourceSpec
    sequence: SequenceSpec
    stage1: StageSpec
    stage2: StageSpec
    cascade: CascadeSpec
    visible_detector: DetectorSpec
    telecom_detector: DetectorSpec
    visible_noise_hz: float  # total background on the visible channel
    snspd_extra_noise_hz: float
    signal_window_ns: float
    noise_delay_ns: float
    bin_ns: float
    gate_noise_to_attempts: bool
    seed: int
    attempts: int | None
    duration_s: float | None
    text: str
    digest: bytes

    @property
    def telecom_noise_hz(self) -> float:
        """Effective telecom noise: darks plus the additive correction."""
        return self.telecom_detector.dark_hz + self.snspd_extra_noise_hz

    def run_plan(self, *, seed: int | None = None, attempts: int | None = None,
                 duration_s: float | None = None) -> RunPlan:
        """Plan a run, with optional overrides taking precedence."""
        if attempts is not None and duration_s is not None:
            raise ConfigError("give either attempts or duration_s, not both")
        if attempts is None and duration_s is None:
            attempts, duration_s = self.attempts, self.duration_s
        if attempts is None and duration_s is None:
            raise ConfigError("run length missing: set run.attempts or "
                              "run.duration_s, or pass one explicitly")
        return RunPlan(master_seed=self.seed if seed is None else seed,
                       attempts=attempts, duration_s=duration_s)

    def simulate(self, *, seed: int | None = None, attempts: int | None = None,
                 duration_s: float | None = None, workers: int = 1,
                 batch_cycles: int = 4096) -> TagStream:
        """Simulate a run under this configuration."""
        plan = self.run_plan(seed=seed, attempts=attempts, duration_s=duration_s)
        return simulate_run(
            self.sequence, plan, self.source,
            visible_detector=self.visible_detector,
            telecom_detector=self.telecom_detector,
            visible_noise_hz=self.visible_noise_hz,
            telecom_noise_hz=self.telecom_noise_hz,
            gate_noise_to_attempts=self.gate_noise_to_attempts,
            config_digest=self.digest,
            workers=workers,
            batch_cycles=batch_cycles,
        )


def config_digest(text: str) -> bytes:
    """SHA-256 of the configuration text, byte for byte."""
    return hashlib.sha256(text.encode()).digest()


def load_config(text: str) -> ExperimentConfig:
    """Parse configuration text; missing keys take their defaults.

    Unknown keys, duplicate keys, out-of-range values, and cross-field
    contradictions (both run lengths at once, negative effective noise) are
    all refused with the offending key named.
    """
    values = _parse_config_text(text)

    def get(key: str):
        if key in values:
            return values[key]
        return DEFAULTS[key][1]

    if values.get("run.attempts") is not None and \
            values.get("run.duration_s") is not None:
        raise ConfigError("run.attempts and run.duration_s are mutually exclusive")

    try:
        source = SourceSpec(
            tau_ns=get("source.tau_ns"),
            p_visible_window=get("source.p_pmt_window"),
            p_telecom_window=get("source.p_snspd_window"),
            reference_window_ns=get("window.signal_ns"),
        )
    except ValueError as exc:
        raise ConfigError(f"source.*: {exc}") from exc
    try:
        sequence = SequenceSpec(
            cooling_us=get("seq.cooling_us"),
            attempts_per_cycle=get("seq.attempts_per_cycle"),
            attempt_us=get("seq.attempt_us"),
            pump_us=get("seq.pump_us"),
            delay_ns=get("seq.delay_ns"),
            trigger_ns=get("seq.trigger_ns"),
            excite_ns=get("seq.excite_ns"),
            dead_time_us=get("seq.dead_time_us"),
        )
    except ValueError as exc:
        raise ConfigError(f"seq.*: {exc}") from exc

    try:
        # The first stage is specified by its operating efficiency, not a
        # full curve; pin the curve peak at the operating point so the stage
        # runs at stage1.eta.
        pump1 = get("stage1.pump_mw")
        stage1 = StageSpec(
            label="visible-to-intermediate",
            curve=EfficiencyCurve(eta0=get("stage1.eta"),
                                  pm_mw=max(pump1, 1e-9)),
            pump_mw=pump1,
            polarization_acceptance="single",
        )
    except ValueError as exc:
        raise ConfigError(f"stage1.*: {exc}") from exc
    try:
        stage2 = StageSpec(
            label="intermediate-to-telecom",
            curve=EfficiencyCurve(eta0=get("stage2.eta0"),
                                  pm_mw=get("stage2.pm_mw")),
            pump_mw=get("stage2.pump_mw"),
            noise=NoiseLine(slope_hz_per_mw=get("stage2.noise_slope_hz_per_mw"),
                            intercept_hz=0.0),
            polarization_acceptance="single",
            filter_transmission=get("stage2.filter_transmission"),
        )
    except ValueError as exc:
        raise ConfigError(f"stage2.*: {exc}") from exc
    try:
        cascade = CascadeSpec(
            stages=(stage1, stage2),
            interstage_coupling=get("coupling.interstage"),
            source_polarization_split=get("source.pol_split"),
        )
    except ValueError as exc:
        raise ConfigError(f"coupling.*: {exc}") from exc

    try:
        visible_detector = DetectorSpec(
            label="pmt", efficiency=1.0, dark_hz=get("pmt.bg_hz"),
            jitter_sigma_ps=get("pmt.jitter_ps"))
        telecom_detector = DetectorSpec(
            label="snspd", efficiency=get("snspd.eff"),
            dark_hz=get("snspd.dark_hz"),
            jitter_sigma_ps=get("snspd.jitter_ps"))
    except ValueError as exc:
        raise ConfigError(f"detector keys: {exc}") from exc

    telecom_noise = get("snspd.dark_hz") + get("snspd.extra_noise_hz")
    if telecom_noise < 0.0:
        raise ConfigError(
            f"snspd.dark_hz + snspd.extra_noise_hz = {telecom_noise} Hz "
            "must be >= 0")

    return ExperimentConfig(
        source=source,
        sequence=sequence,
        stage1=stage1,
        stage2=stage2,
        cascade=cascade,
        visible_detector=visible_detector,
        telecom_detector=telecom_detector,
        visible_noise_hz=get("pmt.bg_hz"),
        snspd_extra_noise_hz=get("snspd.extra_noise_hz"),
        signal_window_ns=get("window.signal_ns"),
        noise_delay_ns=get("window.noise_delay_ns"),
        bin_ns=get("analysis.bin_ns"),
        gate_noise_to_attempts=get("noise.gated"),
        seed=get("run.seed"),
        attempts=values.get("run.attempts"),
        duration_s=values.get("run.duration_s"),
        text=text,
        digest=config_digest(text),
    )


def default_config() -> ExperimentConfig:
    """The built-in operating point (empty configuration text)."""
    return load_config("")


# --- delimited reports ------------------------------------------------------

@dataclass
class ReportTable:
    """One named CSV section of a report."""

    name: str
    headers: list[str]
    rows: list[list]

    def validate(self) -> None:
        if not self.name or any(c in self.name for c in ",\n"):
            raise ValueError(f"bad table name {self.name!r}")
        for r, row in enumerate(self.rows):
            if len(row) != len(self.headers):
                raise ValueError(
                    f"table {self.name!r} row {r} has {len(row)} cells, "
                    f"expected {len(self.headers)}")
            for cell in row:
                if isinstance(cell, float) and not math.isfinite(cell):
                    raise ValueError(
                        f"table {self.name!r} row {r} contains a non-finite "
                        "number")


@dataclass
class Report:
    """A set of named tables rendered as concatenated CSV sections."""

    tool: str
    tables: list[ReportTable]

    def render(self) -> str:
        """Render to text; refuses non-finite numeric cells."""
        out = io.StringIO()
        for i, table in enumerate(self.tables):
            table.validate()
            if i:
                out.write("\n")
            out.write(f"[{table.name}]\n")
            out.write(",".join(table.headers) + "\n")
            for row in table.rows:
                out.write(",".join(_cell(c) for c in row) + "\n")
        return out.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    text = str(value)
    if any(c in text for c in ",\n\""):
        raise ValueError(f"cell {text!r} would need quoting; use simpler values")
    return text
