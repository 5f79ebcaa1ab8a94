"""Dataset tensor, file loaders and per-series standardization.

Values are stored with shape ``(|K_1|, ..., |K_n|, T)``.  Missing cells hold
NaN; consumers must go through the availability mask (see
:meth:`DatasetTensor.masked_values`) rather than reading raw values.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, IntegrityError, UnprocessableSeriesError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
DEFAULT_NA_TOKENS = ("", "nan", "NaN", "NAN")


@dataclass(frozen=True)
class DimensionCatalog:
    """A named dimension and its ordered members.

    Members are either strings (categorical) or equal-length tuples of floats.
    """

    name: str
    members: tuple

    def __post_init__(self):
        members = tuple(tuple(m) if isinstance(m, (list, tuple, np.ndarray)) else m
                        for m in self.members)
        object.__setattr__(self, "members", members)
        if len(set(members)) != len(members):
            raise IntegrityError(f"dimension {self.name!r}: duplicate member labels")
        vec = [m for m in members if isinstance(m, tuple)]
        if vec and (len(vec) != len(members) or len({len(m) for m in vec}) != 1):
            raise IntegrityError(
                f"dimension {self.name!r}: real-vector members must all share one length")

    def __len__(self):
        return len(self.members)

    @property
    def is_real(self) -> bool:
        return bool(self.members) and isinstance(self.members[0], tuple)

    def raw_vectors(self) -> np.ndarray:
        return np.array(self.members, dtype=np.float64)


@dataclass
class DatasetTensor:
    dims: list
    values: np.ndarray
    available: np.ndarray = None
    missing: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        shape = tuple(len(d) for d in self.dims)
        if self.values.shape[:-1] != shape:
            raise DataFormatError(
                f"values shape {self.values.shape} does not match dims {shape}")
        if self.available is None:
            self.available = ~np.isnan(self.values)
        self.available = np.asarray(self.available, dtype=bool)
        if self.available.shape != self.values.shape:
            raise DataFormatError("availability mask shape mismatch")
        self.missing = ~self.available
        self.values = np.where(self.available, self.values, np.nan)

    @property
    def horizon(self) -> int:
        return self.values.shape[-1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_series(self) -> int:
        return int(np.prod(self.values.shape[:-1]))

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(self.n_series, self.horizon)

    def flat_available(self) -> np.ndarray:
        return self.available.reshape(self.n_series, self.horizon)

    def masked_values(self) -> np.ndarray:
        """Values with every unavailable cell replaced by 0."""
        return np.where(self.available, self.values, 0.0)

    def member_index(self) -> np.ndarray:
        """``(n_series, n)`` array of per-dimension member indices, series-major."""
        grid = np.unravel_index(np.arange(self.n_series), self.values.shape[:-1])
        return np.stack(grid, axis=1)

    def with_missing(self, missing: np.ndarray) -> "DatasetTensor":
        """Copy with extra cells hidden; truth at those cells is dropped."""
        missing = np.asarray(missing, dtype=bool).reshape(self.shape)
        return DatasetTensor(self.dims, self.values.copy(), self.available & ~missing)

    def copy(self) -> "DatasetTensor":
        return DatasetTensor(self.dims, self.values.copy(), self.available.copy())

    def equals(self, other: "DatasetTensor") -> bool:
        return (self.shape == other.shape
                and [d.members for d in self.dims] == [d.members for d in other.dims]
                and np.array_equal(self.available, other.available)
                and np.array_equal(self.masked_values(), other.masked_values()))


def from_matrix(matrix, available=None, name="series") -> DatasetTensor:
    """Single-dimension dataset from an ``N x T`` matrix (NaN = missing)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    dim = DimensionCatalog(name, tuple(f"s{i}" for i in range(matrix.shape[0])))
    return DatasetTensor([dim], matrix, available)


# ---------------------------------------------------------------- dense format


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def _parse_cell(tok: str, na_tokens, line: int) -> float:
    tok = tok.strip()
    if tok in na_tokens:
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise DataFormatError(f"non-numeric token {tok!r}", line=line) from None


def _is_header(cells, na_tokens) -> bool:
    for c in cells:
        c = c.strip()
        if c in na_tokens:
            continue
        try:
            float(c)
        except ValueError:
            return True
    return False


def load_dense(path, layout: str = "time-rows", na_token: str | None = None) -> DatasetTensor:
    """Read a delimited numeric matrix.

    ``time-rows`` means one row per time step (columns are series);
    ``time-cols`` means one row per series.  Blank or NaN cells are missing.
    An optional non-numeric first line is a header; under ``time-rows`` it
    names the series.
    """
    if layout not in ("time-rows", "time-cols"):
        raise ConfigurationError(f"unknown layout {layout!r}")
    na_tokens = DEFAULT_NA_TOKENS if na_token is None else (na_token,)
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    while lines and not lines[-1].strip("\r"):
        lines.pop()
    if not lines:
        raise DataFormatError("empty file")
    lines = [ln.rstrip("\r") for ln in lines]
    delim = _sniff_delimiter(lines[0])
    names = None
    first = lines[0].split(delim)
    start = 1
    if _is_header(first, na_tokens):
        names = [c.strip() for c in first]
        start = 2
    rows, width = [], len(first)
    for lineno, line in enumerate(lines[start - 1:], start=start):
        cells = line.split(delim)
        if len(cells) != width:
            raise DataFormatError(f"expected {width} cells, found {len(cells)}", line=lineno)
        rows.append([_parse_cell(c, na_tokens, lineno) for c in cells])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    if layout == "time-rows":
        matrix = matrix.T
    ds = from_matrix(matrix)
    if names is not None and layout == "time-rows":
        ds = DatasetTensor([DimensionCatalog("series", tuple(names))], ds.values)
    return ds


def write_dense(ds: DatasetTensor, path, layout: str = "time-rows", delimiter: str = ",") -> None:
    """Inverse of :func:`load_dense`; floats use ``repr`` so values round-trip exactly.

    Under ``time-rows`` a header of series labels is written first.  Missing
    cells are written as ``NaN`` so single-column rows never end up blank.
    """
    mat = ds.flat_values()
    avail = ds.flat_available()
    buf = io.StringIO()
    if layout == "time-rows":
        mat, avail = mat.T, avail.T
        labels = [str(m) for m in ds.dims[0].members] if len(ds.dims) == 1 else \
            [f"s{i}" for i in range(ds.n_series)]
        buf.write(delimiter.join(labels) + "\n")
    for row, arow in zip(mat, avail):
        buf.write(delimiter.join(repr(float(v)) if a else "NaN" for v, a in zip(row, arow)))
        buf.write("\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_mask(mask, path, delimiter: str = ",") -> None:
    """Dense 0/1 matrix, one row per series."""
    mask = np.asarray(mask, dtype=np.int8)
    mask = mask.reshape(-1, mask.shape[-1])
    lines = [delimiter.join(str(int(v)) for v in row) for row in mask]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mask(path, shape=None) -> np.ndarray:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    delim = _sniff_delimiter(lines[0]) if lines else ","
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(delim)]
        if any(c not in ("0", "1") for c in cells):
            raise DataFormatError("mask cells must be 0 or 1", line=lineno)
        if rows and len(cells) != len(rows[0]):
            raise DataFormatError(f"expected {len(rows[0])} cells, got {len(cells)}", line=lineno)
        rows.append([c == "1" for c in cells])
    mask = np.array(rows, dtype=bool)
    if shape is None:
        return mask
    if mask.size != int(np.prod(shape)):
        raise DataFormatError(f"mask has {mask.size} cells, dataset has {int(np.prod(shape))}")
    return mask.reshape(shape)


# ---------------------------------------------------------------- long format


def _parse_member(tok: str):
    if ";" in tok:
        try:
            return tuple(float(x) for x in tok.split(";"))
        except ValueError:
            pass
    return tok


def load_long(path, na_token: str | None = None) -> DatasetTensor:
    """Read ``dim1,...,dimn,t,value`` rows into an ``(n+1)``-dimensional tensor.

    Member order follows first appearance.  Absent (combination, t) pairs are
    missing; ``t`` is shifted so the smallest value maps to index 0.
    """
    na_tokens = DEFAULT_NA_TOKENS if na_token is None else (na_token,)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-2:] != ["t", "value"]:
            raise DataFormatError("header must be dim1,...,dimn,t,value", line=1)
        names = header[:-2]
        members = [dict() for _ in names]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} cells, found {len(row)}",
                                      line=lineno)
            key = []
            for i, tok in enumerate(row[:-2]):
                m = _parse_member(tok.strip())
                key.append(members[i].setdefault(m, len(members[i])))
            try:
                t = int(row[-2])
            except ValueError:
                raise DataFormatError(f"time index {row[-2]!r} is not an integer",
                                      line=lineno) from None
            records.append((tuple(key), t, _parse_cell(row[-1], na_tokens, lineno), lineno))
    if not records:
        raise DataFormatError("no data rows")
    t0 = min(r[1] for r in records)
    horizon = max(r[1] for r in records) - t0 + 1
    dims = [DimensionCatalog(n, tuple(m.keys())) for n, m in zip(names, members)]
    shape = tuple(len(d) for d in dims) + (horizon,)
    values = np.full(shape, np.nan)
    seen = np.zeros(shape, dtype=bool)
    for key, t, v, lineno in records:
        cell = key + (t - t0,)
        if seen[cell]:
            raise IntegrityError(f"line {lineno}: duplicate row for {key} at t={t}")
        seen[cell] = True
        values[cell] = v
    present = seen.any(axis=-1)
    absent_frac = 1.0 - present.mean()
    if absent_frac > 0.5:
        log.warning("%.0f%% of member combinations are absent; marking them missing",
                    100 * absent_frac)
    return DatasetTensor(dims, values)


def write_long(ds: DatasetTensor, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([d.name for d in ds.dims] + ["t", "value"])
        for cell in zip(*np.nonzero(ds.available)):
            labels = []
            for d, i in zip(ds.dims, cell[:-1]):
                m = d.members[i]
                labels.append(";".join(repr(x) for x in m) if isinstance(m, tuple) else m)
            w.writerow(labels + [cell[-1], repr(float(ds.values[cell]))])


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class SeriesStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        shape = values.shape
        flat = values.reshape(len(self.mean), -1)
        return ((flat - self.mean[:, None]) / self.std[:, None]).reshape(shape)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        shape = values.shape
        flat = values.reshape(len(self.mean), -1)
        return (flat * self.std[:, None] + self.mean[:, None]).reshape(shape)


def series_stats(ds: DatasetTensor) -> SeriesStats:
    vals, avail = ds.flat_values(), ds.flat_available()
    counts = avail.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise UnprocessableSeriesError(int(empty[0]))
    # shift by the first available value so constant series get an exact mean
    first = vals[np.arange(len(vals)), avail.argmax(axis=1)]
    d = np.where(avail, vals - first[:, None], 0.0)
    mu = first + d.sum(axis=1) / counts
    var = (np.where(avail, vals - mu[:, None], 0.0) ** 2).sum(axis=1) / counts
    return SeriesStats(mu, np.maximum(np.sqrt(var), STD_FLOOR))


def normalize(ds: DatasetTensor) -> tuple[DatasetTensor, SeriesStats]:
    """Standardize each series over its available cells (population std)."""
    stats = series_stats(ds)
    return DatasetTensor(ds.dims, stats.normalize(ds.values), ds.available.copy()), stats


def denormalize(ds: DatasetTensor, stats: SeriesStats) -> DatasetTensor:
    return DatasetTensor(ds.dims, stats.denormalize(ds.values), ds.available.copy())

