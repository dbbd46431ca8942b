"""Dataset ingestion, splitting, scaling, windowing and noise.

Series are held as ``(rows, channels)`` float64 arrays. Window collections
stack inputs as ``(N, L_in, C)`` and targets as ``(N, L_pred, C)``.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path

import numpy as np

from . import seeding


class DataError(ValueError):
    pass


class MissingDateColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        super().__init__(f"non-numeric cell at row {row}, column {col!r}: {value!r}")
        self.row = row
        self.col = col


class EmptyFile(DataError):
    pass


class SpecExceedsLength(DataError):
    pass


class EmptySegment(DataError):
    pass


class SegmentTooShort(DataError):
    pass


class DatasetNotFound(DataError):
    pass


@dataclass
class RawSeries:
    name: str
    timestamps: list
    values: np.ndarray
    columns: list = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    train_rows: int
    val_rows: int
    test_rows: int
    overlap: int = 0

    def __post_init__(self):
        if min(self.train_rows, self.val_rows, self.test_rows) <= 0:
            raise DataError(f"split row counts must be positive: {self}")
        if self.overlap < 0 or self.overlap > self.train_rows:
            raise DataError(f"overlap must lie in [0, train_rows]: {self}")

    @classmethod
    def from_fractions(cls, total_rows, train_frac=0.7, test_frac=0.2, overlap=0):
        train = int(total_rows * train_frac)
        test = int(total_rows * test_frac)
        return cls(train, total_rows - train - test, test, overlap)


def load_csv(path) -> RawSeries:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise EmptyFile(f"{path} is empty")
        header = [h.strip() for h in header]
        if header[0] != "date":
            raise MissingDateColumn(f"{path}: first column must be 'date', found {header[0]!r}")
        columns = header[1:]
        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
            stamps.append(rec[0])
            vals = []
            for col, cell in zip(columns, rec[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(lineno, col, cell) from None
                if not math.isfinite(v):
                    raise NonNumericCell(lineno, col, cell)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")
    return RawSeries(path.stem, stamps, np.asarray(rows, dtype=np.float64), columns)


def chronological_split(values: np.ndarray, spec: SplitSpec):
    """Cut train/val/test; val and test are prefixed with ``overlap`` rows."""
    values = np.asarray(values)
    tr, va, te, ov = spec.train_rows, spec.val_rows, spec.test_rows, spec.overlap
    if tr + va + te > len(values):
        raise SpecExceedsLength(f"split needs {tr + va + te} rows, series has {len(values)}")
    train = values[:tr]
    val = values[tr - ov : tr + va]
    test = values[tr + va - ov : tr + va + te]
    return train, val, test


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray

    def apply(self, segment):
        return (np.asarray(segment) - self.mean) / self.std

    def invert(self, segment):
        return np.asarray(segment) * self.std + self.mean


def fit_scaler(train) -> Scaler:
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise EmptySegment("cannot fit a scaler on an empty segment")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    zero = std == 0.0
    if zero.any():
        warnings.warn(f"zero train variance in channels {np.flatnonzero(zero).tolist()}; std set to 1")
        std = np.where(zero, 1.0, std)
    return Scaler(mean, std, zero)


def apply_scaler(scaler: Scaler, segment):
    return scaler.apply(segment)


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray
    target: np.ndarray
    origin_index: int


@dataclass(frozen=True)
class Windows:
    """Stride-1 windows cut from one segment, in chronological order."""

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, i) -> WindowSample:
        return WindowSample(self.inputs[i], self.targets[i], int(self.origins[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "Windows":
        return Windows(self.inputs[idx], self.targets[idx], self.origins[idx])

    def with_inputs(self, inputs) -> "Windows":
        return Windows(inputs, self.targets, self.origins)

    @property
    def L_in(self):
        return self.inputs.shape[1]

    @property
    def L_pred(self):
        return self.targets.shape[1]

    @property
    def channels(self):
        return self.inputs.shape[2]


def make_windows(segment, L_in: int, L_pred: int) -> Windows:
    segment = np.ascontiguousarray(segment, dtype=np.float64)
    rows = segment.shape[0]
    if L_in < 1 or L_pred < 1:
        raise DataError("L_in and L_pred must be positive")
    if rows < L_in + L_pred:
        raise SegmentTooShort(f"segment has {rows} rows, needs at least {L_in + L_pred}")
    n = rows - L_in - L_pred + 1
    # (n, C, L) views -> (n, L, C)
    view = np.lib.stride_tricks.sliding_window_view(segment, L_in + L_pred, axis=0)
    view = view.transpose(0, 2, 1)[:n]
    return Windows(view[:, :L_in], view[:, L_in:], np.arange(n))


def _as_generator(rng_seed):
    if isinstance(rng_seed, (int, np.integer)):
        return np.random.default_rng(int(rng_seed))
    return rng_seed


def inject_noise(x, rng_seed):
    """Add ``std(channel) * N(0,1)`` to every cell.

    ``x`` is ``(time, channels)`` or a batch ``(N, time, channels)``; the
    standard deviation is taken over the time axis of each sample. ``rng_seed``
    may be an int or anything with a ``standard_normal(size)`` method.
    """
    x = np.asarray(x, dtype=np.float64)
    std = x.std(axis=-2, keepdims=True)
    eps = _as_generator(rng_seed).standard_normal(x.shape)
    return x + std * eps


def synth_generate(channels: int, rows: int, seed: int, *, period: float = 24.0,
                   noise: float = 0.1, trend: float = 0.5) -> RawSeries:
    """Deterministic sinusoid + trend + Gaussian noise.

    Channel ``c`` at step ``t``::

        (1 + 0.25 c) * sin(2 pi t / period + 2 pi c / channels)
            + trend * (c + 1) * t / rows + noise * eps[t, c]

    with ``eps`` drawn from the stream ``seeding.rng(seed, "synth")``.
    """
    if channels < 1 or rows < 1:
        raise DataError("channels and rows must be positive")
    t = np.arange(rows, dtype=np.float64)[:, None]
    c = np.arange(channels, dtype=np.float64)[None, :]
    values = (1.0 + 0.25 * c) * np.sin(2.0 * np.pi * t / period + 2.0 * np.pi * c / channels)
    values = values + trend * (c + 1.0) * t / rows
    if noise:
        values = values + noise * seeding.rng(seed, seeding.SYNTH).standard_normal((rows, channels))
    start = datetime(2016, 7, 1)
    stamps = [(start + timedelta(hours=i)).isoformat(sep=" ") for i in range(rows)]
    return RawSeries("synthetic", stamps, values, [f"ch{i}" for i in range(channels)])


# ---------------------------------------------------------------- dataset specs

@dataclass(frozen=True)
class DatasetSpec:
    """Contents of a dataset spec file (INI, section ``[dataset]``).

    Keys: ``name``, ``path``, ``channels`` and either the three row counts
    ``train_rows``/``val_rows``/``test_rows`` or ``train_frac``/``test_frac``.
    ``overlap`` is an integer or ``lookback`` (use L_in, the default).
    """

    name: str
    path: str
    channels: int | None = None
    train_rows: int | None = None
    val_rows: int | None = None
    test_rows: int | None = None
    train_frac: float | None = None
    test_frac: float | None = None
    overlap: int | None = None
    base_dir: str = "."

    def split_spec(self, total_rows: int, L_in: int) -> SplitSpec:
        overlap = L_in if self.overlap is None else self.overlap
        if self.train_rows is not None:
            return SplitSpec(self.train_rows, self.val_rows, self.test_rows, overlap)
        return SplitSpec.from_fractions(total_rows, self.train_frac or 0.7,
                                        0.2 if self.test_frac is None else self.test_frac, overlap)

    def resolve_path(self) -> Path:
        p = Path(self.path)
        if p.is_absolute():
            return p
        candidates = [Path(self.base_dir) / p]
        if os.environ.get("TEFN_DATA_DIR"):
            candidates.append(Path(os.environ["TEFN_DATA_DIR"]) / p)
        candidates.append(Path.cwd() / "data" / p)
        for cand in candidates:
            if cand.exists():
                return cand
        return candidates[0]


def load_dataset_spec(path) -> DatasetSpec:
    path = Path(path)
    if not path.exists():
        raise DatasetNotFound(f"dataset spec not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    if "dataset" not in parser:
        raise DataError(f"{path}: missing [dataset] section")
    sec = parser["dataset"]

    def opt(key, conv):
        return conv(sec[key]) if key in sec else None

    overlap = sec.get("overlap", "lookback").strip()
    return DatasetSpec(
        name=sec.get("name", path.stem),
        path=sec["path"],
        channels=opt("channels", int),
        train_rows=opt("train_rows", int),
        val_rows=opt("val_rows", int),
        test_rows=opt("test_rows", int),
        train_frac=opt("train_frac", float),
        test_frac=opt("test_frac", float),
        overlap=None if overlap == "lookback" else int(overlap),
        base_dir=str(path.parent),
    )


BUILTIN_DATASETS = ("ETTh1", "ETTh2", "ETTm1", "ETTm2")


def builtin_spec(name: str) -> DatasetSpec:
    ref = resources.files("tefn") / "datasets" / f"{name}.ini"
    with resources.as_file(ref) as p:
        spec = load_dataset_spec(p)
    # packaged specs look for the CSV via TEFN_DATA_DIR / ./data, not the package dir
    return DatasetSpec(**{**spec.__dict__, "base_dir": os.environ.get("TEFN_DATA_DIR", "data")})


def find_spec(name_or_path) -> DatasetSpec:
    if str(name_or_path) in BUILTIN_DATASETS:
        return builtin_spec(str(name_or_path))
    return load_dataset_spec(name_or_path)


@dataclass
class TaskData:
    train: Windows
    val: Windows
    test: Windows
    scaler: Scaler
    channels: int
    name: str


def prepare(values: np.ndarray, split: SplitSpec, L_in: int, L_pred: int, name="series") -> TaskData:
    """Split, fit the scaler on train rows, standardize, and window every split."""
    train, val, test = chronological_split(values, split)
    scaler = fit_scaler(train)
    return TaskData(
        make_windows(scaler.apply(train), L_in, L_pred),
        make_windows(scaler.apply(val), L_in, L_pred),
        make_windows(scaler.apply(test), L_in, L_pred),
        scaler,
        values.shape[1],
        name,
    )


def load_task_data(spec: DatasetSpec, L_in: int, L_pred: int) -> TaskData:
    csv_path = spec.resolve_path()
    if not csv_path.exists():
        raise DatasetNotFound(f"dataset file not found: {csv_path}")
    series = load_csv(csv_path)
    if spec.channels is not None and series.channels != spec.channels:
        raise DataError(f"{csv_path}: spec declares {spec.channels} channels, file has {series.channels}")
    return prepare(series.values, spec.split_spec(len(series), L_in), L_in, L_pred, spec.name)


def synthetic_task_data(channels, rows, seed, L_in, L_pred, **synth_kw) -> TaskData:
    series = synth_generate(channels, rows, seed, **synth_kw)
    split = SplitSpec.from_fractions(rows, 0.7, 0.2, overlap=L_in)
    return prepare(series.values, split, L_in, L_pred, "synthetic")
