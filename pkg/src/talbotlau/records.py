"""Raw-data records and their on-disk formats.

Fringe scans and TOF traces are stored as JSON documents.  Every document
carries ``format``, ``config_digest`` and ``seed`` at top level; see
FORMATS.md for the field-by-field description.
"""
from dataclasses import dataclass, field
import csv
import hashlib
import io
import json
import os
import tempfile

import numpy as np

FRINGE_FORMAT = "talbotlau.fringe-scans/1"
TOF_FORMAT = "talbotlau.tof-traces/1"


class DataFormatError(ValueError):
    """Malformed or inconsistent data file."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f"{path}: "
        if offset is not None:
            where += f"byte {offset}: "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


@dataclass
class FringeScanRecord:
    positions: np.ndarray        # G3 displacement x3 (m)
    dwell_times: np.ndarray      # s
    counts: np.ndarray           # int
    powers: tuple                # (P1, P2, P3) in W
    mass_setting: float          # kg
    timestamp_offsets: np.ndarray = None  # s since scan start
    dark_rate: float = 0.0       # counts/s, measured with the beam blocked
    period: float = 133e-9       # m
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.dwell_times = np.asarray(self.dwell_times, dtype=float)
        counts = np.asarray(self.counts)
        if counts.size and not np.all(np.equal(np.mod(counts, 1), 0)):
            raise DataFormatError("counts must be integers")
        self.counts = counts.astype(np.int64)
        if self.timestamp_offsets is None:
            self.timestamp_offsets = np.concatenate([[0.0], np.cumsum(self.dwell_times)[:-1]])
        self.timestamp_offsets = np.asarray(self.timestamp_offsets, dtype=float)
        self.powers = tuple(float(p) for p in self.powers)
        n = self.positions.size
        if not (self.dwell_times.size == n and self.counts.size == n and self.timestamp_offsets.size == n):
            raise DataFormatError("positions, dwell_times, counts and timestamps differ in length")
        if np.any(self.counts < 0):
            raise DataFormatError("counts must be non-negative")
        if np.any(self.dwell_times <= 0):
            raise DataFormatError("dwell times must be positive")
        if len(self.powers) != 3:
            raise DataFormatError("powers must hold (P1, P2, P3)")
        if n > 1:
            step = np.diff(self.positions)
            if np.any(step <= 0) or not np.allclose(step, step[0], rtol=1e-6, atol=0):
                raise DataFormatError("positions must increase with a uniform step")

    def __len__(self):
        return self.positions.size

    @property
    def context_key(self):
        return (self.powers, self.mass_setting)

    def to_dict(self):
        return {
            "positions_m": self.positions.tolist(),
            "dwell_s": self.dwell_times.tolist(),
            "counts": self.counts.tolist(),
            "timestamps_s": self.timestamp_offsets.tolist(),
            "powers_W": list(self.powers),
            "mass_setting_kg": self.mass_setting,
            "dark_rate_per_s": self.dark_rate,
            "period_m": self.period,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                positions=d["positions_m"],
                dwell_times=d["dwell_s"],
                counts=d["counts"],
                timestamp_offsets=d.get("timestamps_s"),
                powers=d["powers_W"],
                mass_setting=float(d["mass_setting_kg"]),
                dark_rate=float(d.get("dark_rate_per_s", 0.0)),
                period=float(d.get("period_m", 133e-9)),
                metadata=dict(d.get("metadata", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"fringe scan record missing or invalid field: {exc}") from exc


@dataclass
class TofTrace:
    bin_edges: np.ndarray        # s, arrival time relative to chopper start
    counts: np.ndarray
    chopper_open: float          # s
    flight_path: float           # m
    entrance_voltage: float      # V
    mass: float = None           # kg, of the selected species
    charge_state: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.bin_edges.size != self.counts.size + 1:
            raise DataFormatError("bin_edges must be one longer than counts")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise DataFormatError("bin edges must increase")
        if np.any(self.counts < 0):
            raise DataFormatError("counts must be non-negative")

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def with_counts(self, counts):
        return TofTrace(self.bin_edges, counts, self.chopper_open, self.flight_path,
                        self.entrance_voltage, self.mass, self.charge_state, dict(self.metadata))

    def to_dict(self):
        return {
            "bin_edges_s": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "chopper_open_s": self.chopper_open,
            "flight_path_m": self.flight_path,
            "entrance_voltage_V": self.entrance_voltage,
            "mass_kg": self.mass,
            "charge_state": self.charge_state,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                bin_edges=d["bin_edges_s"],
                counts=d["counts"],
                chopper_open=float(d["chopper_open_s"]),
                flight_path=float(d["flight_path_m"]),
                entrance_voltage=float(d["entrance_voltage_V"]),
                mass=None if d.get("mass_kg") is None else float(d["mass_kg"]),
                charge_state=int(d.get("charge_state", 1)),
                metadata=dict(d.get("metadata", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"TOF trace missing or invalid field: {exc}") from exc


# ---------------------------------------------------------------------------
# digests and files


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write_text(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path, rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row[k]) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _csv_value(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def load_json(path):
    raw = open(path, "rb").read()
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise DataFormatError("file is not UTF-8", path, exc.start) from exc
    except json.JSONDecodeError as exc:
        offset = len(raw.decode("utf-8")[:exc.pos].encode("utf-8"))
        raise DataFormatError(f"invalid JSON: {exc.msg}", path, offset) from exc


def dump_fringe_scans(path, scans, config_digest, seed, extra=None):
    payload = {
        "format": FRINGE_FORMAT,
        "config_digest": config_digest,
        "seed": seed,
        "scans": [s.to_dict() for s in scans],
    }
    if extra:
        payload.update(extra)
    payload["data_digest"] = digest(payload["scans"])
    write_json(path, payload)
    return payload


def dump_tof_traces(path, traces, config_digest, seed, extra=None):
    payload = {
        "format": TOF_FORMAT,
        "config_digest": config_digest,
        "seed": seed,
        "traces": [t.to_dict() for t in traces],
    }
    if extra:
        payload.update(extra)
    payload["data_digest"] = digest(payload["traces"])
    write_json(path, payload)
    return payload


def load_records(path):
    """Load a data file; returns ``(format, records, document)``."""
    doc = load_json(path)
    if not isinstance(doc, dict) or "format" not in doc:
        raise DataFormatError("missing 'format' field", path, 0)
    fmt = doc["format"]
    if fmt == FRINGE_FORMAT:
        return fmt, [FringeScanRecord.from_dict(d) for d in doc.get("scans", [])], doc
    if fmt == TOF_FORMAT:
        return fmt, [TofTrace.from_dict(d) for d in doc.get("traces", [])], doc
    raise DataFormatError(f"unknown format {fmt!r}", path, 0)
