"""Sensor record loading and the synthetic hive generator."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateConfig,
    EmptyDataset,
    MalformedRow,
    MissingColumn,
)

FIELDS = ("timestamp", "t_in", "t_out", "h_in", "h_out", "p_in", "p_out", "audio_rms", "label")
OPTIONAL_FIELDS = ("audio_rms",)

DEFAULT_SCHEMA = {
    "timestamp": "t",
    "t_in": "t_in",
    "t_out": "t_out",
    "h_in": "h_in",
    "h_out": "h_out",
    "p_in": "p_in",
    "p_out": "p_out",
    "audio_rms": "audio_rms",
    "label": "queen",
}


@dataclass(frozen=True)
class SensorSample:
    timestamp: int
    t_in: float
    t_out: float
    h_in: float
    h_out: float
    p_in: float
    p_out: float
    audio_rms: Optional[float] = None
    label: int = 1

    def validate(self):
        """Return None if the invariants hold, else a short reason string."""
        env = (self.t_in, self.t_out, self.h_in, self.h_out, self.p_in, self.p_out)
        if not all(math.isfinite(v) for v in env):
            return "non-finite environmental value"
        if not (0.0 <= self.h_in <= 100.0 and 0.0 <= self.h_out <= 100.0):
            return "humidity out of range [0, 100]"
        if self.audio_rms is not None and not (math.isfinite(self.audio_rms) and self.audio_rms >= 0):
            return "audio_rms must be finite and >= 0"
        if self.label not in (0, 1):
            return "label must be 0 or 1"
        return None

    @property
    def env(self):
        return (self.t_in, self.t_out, self.h_in, self.h_out, self.p_in, self.p_out)


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    source: str = "csv"
    rejected: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((s.label for s in self.samples), dtype=np.int64, count=len(self.samples))

    @property
    def has_audio(self) -> bool:
        return bool(self.samples) and all(s.audio_rms is not None for s in self.samples)

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.source)


# --- CSV ----------------------------------------------------------------

def _resolve_schema(schema):
    merged = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(FIELDS)
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        merged.update(schema)
    return merged


def _parse_int(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        v = float(text)
        if not v.is_integer():
            raise ValueError(f"not an integer: {text!r}")
        return int(v)


def _row_to_sample(row, cols):
    audio = None
    if cols.get("audio_rms") is not None:
        raw = row[cols["audio_rms"]].strip()
        if raw:
            audio = float(raw)
    return SensorSample(
        timestamp=_parse_int(row[cols["timestamp"]]),
        t_in=float(row[cols["t_in"]]),
        t_out=float(row[cols["t_out"]]),
        h_in=float(row[cols["h_in"]]),
        h_out=float(row[cols["h_out"]]),
        p_in=float(row[cols["p_in"]]),
        p_out=float(row[cols["p_out"]]),
        audio_rms=audio,
        label=_parse_int(row[cols["label"]]),
    )


def parse_dataset_text(text: str, schema: Optional[Mapping[str, str]] = None, *,
                       max_bad_fraction: float = 0.01,
                       max_bad_rows: Optional[int] = None) -> Dataset:
    schema = _resolve_schema(schema)
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyDataset("no header row") from None
    except csv.Error as exc:
        raise MalformedRow(1, str(exc)) from None
    header = [h.strip() for h in header]

    cols = {}
    for key, name in schema.items():
        if name in header:
            cols[key] = header.index(name)
        elif key in OPTIONAL_FIELDS:
            cols[key] = None
        else:
            raise MissingColumn(name)

    samples = []
    rejected = []
    n_rows = 0
    while True:
        try:
            row = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            n_rows += 1
            rejected.append(MalformedRow(reader.line_num, str(exc)))
            continue
        if not row or all(not c.strip() for c in row):
            continue
        n_rows += 1
        line = reader.line_num
        if len(row) != len(header):
            rejected.append(MalformedRow(line, f"expected {len(header)} fields, got {len(row)}"))
        else:
            try:
                sample = _row_to_sample(row, cols)
            except (ValueError, OverflowError) as exc:
                rejected.append(MalformedRow(line, str(exc)))
            else:
                reason = sample.validate()
                if reason:
                    rejected.append(MalformedRow(line, reason))
                else:
                    samples.append(sample)
        if max_bad_rows is not None and len(rejected) > max_bad_rows:
            first = rejected[0]
            raise MalformedRow(first.line, first.reason, rejected)

    if rejected and len(rejected) > max_bad_fraction * n_rows:
        first = rejected[0]
        raise MalformedRow(first.line, first.reason, rejected)
    if not samples:
        raise EmptyDataset("no valid rows")
    return Dataset(tuple(samples), "csv", tuple((r.line, r.reason) for r in rejected))


def parse_dataset_bytes(data: bytes, schema=None, **kwargs) -> Dataset:
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise DataError(f"input is not UTF-8: {exc.reason} at byte {exc.start}") from None
    if "\x00" in text:
        raise DataError("input contains NUL bytes")
    return parse_dataset_text(text, schema, **kwargs)


def parse_dataset_csv(path, schema=None, **kwargs) -> Dataset:
    return parse_dataset_bytes(Path(path).read_bytes(), schema, **kwargs)


def write_dataset_csv(dataset: Dataset, path=None, schema=None) -> str:
    """Serialize with repr-exact floats; returns the text and writes it if `path` is given."""
    schema = _resolve_schema(schema)
    with_audio = any(s.audio_rms is not None for s in dataset)
    keys = [k for k in FIELDS if with_audio or k != "audio_rms"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([schema[k] for k in keys])
    for s in dataset:
        row = []
        for k in keys:
            v = getattr(s, k)
            row.append("" if v is None else repr(v))
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --- synthetic generator ------------------------------------------------

# Per channel: (intercept, slope on the outside reading, noise std). The queenless
# response is queenright + separation * (queenless - queenright).
_QUEENRIGHT = {
    "t": (34.5 - 0.05 * 20.0, 0.05, 0.4),
    "h": (55.0 - 0.05 * 60.0, 0.05, 1.5),
    "p": (0.0, 0.0, 0.05),
}
_QUEENLESS = {
    "t": (10.0, 0.6, 1.5),
    "h": (0.0, 0.6, 3.0),
    "p": (0.1, 0.0, 0.3),
}


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 6000
    queen_fraction: float = 0.87
    seed: int = 0
    class_separation: float = 1.5
    channel_separation: tuple = (1.0, 1.0, 1.0)
    start_time: int = 1650000000
    interval_s: int = 600

    def validate(self):
        if self.n_samples < 10:
            raise DegenerateConfig("n_samples must be >= 10")
        if not 0.0 < self.queen_fraction < 1.0:
            raise DegenerateConfig("queen_fraction must lie in (0, 1)")
        if not self.class_separation > 0:
            raise DegenerateConfig("class_separation must be > 0")
        if len(self.channel_separation) != 3 or any(s < 0 for s in self.channel_separation):
            raise DegenerateConfig("channel_separation needs three non-negative values")
        if not 0 <= self.seed < 2**64:
            raise DegenerateConfig("seed must be a 64-bit unsigned integer")
        n_pos = round(self.n_samples * self.queen_fraction)
        if n_pos in (0, self.n_samples):
            raise DegenerateConfig("configuration yields a single class")


def _channel(rng, key, ext, label, sep):
    a0, b0, s0 = _QUEENRIGHT[key]
    a1, b1, s1 = (q + sep * (l - q) for q, l in zip(_QUEENRIGHT[key], _QUEENLESS[key]))
    n = len(ext)
    present = a0 + b0 * ext + rng.normal(0.0, s0, n)
    absent = a1 + b1 * ext + rng.normal(0.0, max(s1, 0.0), n)
    return np.where(label == 1, present, absent)


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> Dataset:
    cfg.validate()
    n = cfg.n_samples
    rng = np.random.default_rng(cfg.seed)

    label = np.zeros(n, dtype=np.int64)
    label[: round(n * cfg.queen_fraction)] = 1
    rng.shuffle(label)

    ts = cfg.start_time + cfg.interval_s * np.arange(n, dtype=np.int64)
    phase = 2.0 * np.pi * (ts % 86400) / 86400.0
    t_out = 17.5 + 4.0 * np.sin(phase) + rng.uniform(-13.5, 13.5, n)
    h_out = rng.uniform(30.0, 90.0, n)
    p_out = rng.normal(1013.0, 8.0, n)

    st, sh, sp = (cfg.class_separation * s for s in cfg.channel_separation)
    t_in = _channel(rng, "t", t_out, label, st)
    h_in = np.clip(_channel(rng, "h", h_out, label, sh), 0.0, 100.0)
    p_in = p_out + _channel(rng, "p", p_out, label, sp)
    audio = np.where(label == 1,
                     rng.lognormal(np.log(0.10), 0.5, n),
                     rng.lognormal(np.log(0.12), 0.6, n))

    samples = tuple(
        SensorSample(int(ts[i]), float(t_in[i]), float(t_out[i]), float(h_in[i]), float(h_out[i]),
                     float(p_in[i]), float(p_out[i]), float(audio[i]), int(label[i]))
        for i in range(n)
    )
    return Dataset(samples, "synthetic")


def concat(datasets: Sequence[Dataset]) -> Dataset:
    samples = tuple(s for d in datasets for s in d)
    return Dataset(samples, datasets[0].source if datasets else "csv")
