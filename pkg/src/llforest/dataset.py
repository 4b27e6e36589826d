"""Data containers, CSV ingestion and deterministic sampling."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, SchemaError, SizeError


@dataclass(frozen=True)
class Dataset:
    """Immutable design matrix with responses and an optional binary treatment.

    Features are used exactly as given; nothing is rescaled to the unit cube.
    """

    features: np.ndarray
    responses: np.ndarray
    treatment: Optional[np.ndarray] = None
    column_names: tuple = field(default=())

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.responses, dtype=np.float64, copy=True).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise SizeError("features must be a 2-d array")
        n, d = X.shape
        if n < 2:
            raise SizeError(f"need at least 2 rows, got {n}")
        if d < 1:
            raise SizeError("need at least one feature column")
        if y.shape[0] != n:
            raise SizeError(f"{y.shape[0]} responses for {n} rows")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise ParseError(f"non-finite feature at row {r}, column {c}", row=int(r), column=int(c))
        if not np.all(np.isfinite(y)):
            r = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ParseError(f"non-finite response at row {r}", row=r)
        W = None
        if self.treatment is not None:
            W = np.array(self.treatment, dtype=np.float64, copy=True).ravel()
            if W.shape[0] != n:
                raise SizeError(f"{W.shape[0]} treatment values for {n} rows")
            if not np.all((W == 0.0) | (W == 1.0)):
                raise ParseError("treatment must be 0/1")
        names = tuple(self.column_names) if self.column_names else tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise SchemaError(f"{len(names)} column names for {d} feature columns")
        for arr in (X, y, W):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "treatment", W)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        W = None if self.treatment is None else self.treatment[rows]
        return Dataset(self.features[rows], self.responses[rows], W, self.column_names)

    def with_responses(self, responses) -> "Dataset":
        return Dataset(self.features, responses, self.treatment, self.column_names)

    def fingerprint(self) -> str:
        """SHA-256 over the raw bytes of every array and the column names."""
        h = hashlib.sha256()
        h.update(",".join(self.column_names).encode())
        for arr in (self.features, self.responses, self.treatment):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SeededRng:
    """A named random stream derived from a master seed.

    Two instances with the same ``(master_seed, stream_id)`` always produce the
    same draws, no matter which thread consumes them or in what order streams
    are created.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self, *subkeys: int) -> np.random.Generator:
        key = (int(self.stream_id),) + tuple(int(k) for k in subkeys)
        ss = np.random.SeedSequence(int(self.master_seed) & ((1 << 64) - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, stream_id: int) -> "SeededRng":
        """A sibling stream with a different id under the same master seed."""
        return SeededRng(self.master_seed, stream_id)


def as_rng(rng) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    if rng is None:
        return SeededRng(0)
    return SeededRng(int(rng))


def _parse_cell(text: str, line: int, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {row} (line {line}), column {col!r}: cannot parse {text!r}", row=row, column=col) from None
    if not math.isfinite(value):
        raise ParseError(f"row {row} (line {line}), column {col!r}: non-finite value {text!r}", row=row, column=col)
    return value


def _read_table(path) -> tuple[list, list]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def _columns(header, rows, names) -> dict:
    pos = {h: i for i, h in enumerate(header)}
    for r, cells in enumerate(rows):
        if len(cells) != len(header):
            raise ParseError(f"row {r + 1} (line {r + 2}) has {len(cells)} cells, expected {len(header)}", row=r + 1)
    out = {}
    for name in names:
        j = pos[name]
        col = np.empty(len(rows))
        for r, cells in enumerate(rows):
            col[r] = _parse_cell(cells[j].strip(), r + 2, r + 1, name)
        out[name] = col
    return out


def _require(header, needed) -> None:
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")


def load_csv(path, response_column: str, treatment_column: Optional[str] = None,
             feature_columns: Optional[Sequence[str]] = None) -> Dataset:
    """Read a headered, comma-separated numeric file into a :class:`Dataset`.

    Every column other than the response and treatment becomes a feature, in
    header order, unless ``feature_columns`` names them explicitly. Row
    numbers in error messages are 1-based data rows (the header is line 1).
    """
    header, rows = _read_table(path)
    needed = [response_column] + ([treatment_column] if treatment_column else [])
    if feature_columns is not None:
        needed += list(feature_columns)
    _require(header, needed)
    if feature_columns is None:
        feature_columns = [h for h in header if h not in (response_column, treatment_column)]
    if not feature_columns:
        raise SchemaError("no feature columns left after removing response/treatment")
    if len(rows) < 2:
        raise SizeError(f"need at least 2 data rows, got {len(rows)}")
    cols = _columns(header, rows, list(feature_columns) + needed[:1 + bool(treatment_column)])
    X = np.column_stack([cols[c] for c in feature_columns])
    W = cols[treatment_column] if treatment_column else None
    return Dataset(X, cols[response_column], W, tuple(feature_columns))


def load_features(path, feature_columns: Sequence[str]) -> np.ndarray:
    """Read just the named columns, in the given order, as an ``(n, d)`` matrix."""
    header, rows = _read_table(path)
    _require(header, feature_columns)
    if not rows:
        raise SizeError(f"{path} has no data rows")
    cols = _columns(header, rows, feature_columns)
    return np.column_stack([cols[c] for c in feature_columns])


def write_csv(path, columns: dict) -> None:
    """Write equal-length columns to ``path`` with a header row."""
    names = list(columns)
    data = [np.asarray(columns[k]) for k in names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def draw_disjoint_subsamples(n: int, subsample_size: int, honesty_fraction: float,
                             rng, pool=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw the structure sample J and the estimation sample I for one tree.

    ``|J| = round((1 - honesty_fraction) * s)`` and ``|I| = s - |J|``; both are
    drawn without replacement from ``pool`` (default: all of ``0..n-1``).
    Returns sorted index arrays.
    """
    s = int(subsample_size)
    if pool is None:
        pool = np.arange(n)
    pool = np.asarray(pool)
    if s > len(pool):
        raise SizeError(f"subsample size {s} exceeds available {len(pool)} points")
    if not 0.0 < honesty_fraction < 1.0:
        raise SizeError("honesty_fraction must lie in (0, 1)")
    n_j = int(round((1.0 - honesty_fraction) * s))
    if n_j < 1 or s - n_j < 1:
        raise SizeError(f"subsample of {s} cannot be split into two nonempty halves")
    gen = rng if isinstance(rng, np.random.Generator) else as_rng(rng).generator()
    drawn = gen.choice(pool, size=s, replace=False)
    return np.sort(drawn[:n_j]), np.sort(drawn[n_j:])
