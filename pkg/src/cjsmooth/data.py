"""
Encounter histories, m-/d-array summaries and their CSV formats.

Occasions are 1-based throughout the public API.  Observation codes:
0 not observed, 1 seen alive, 2 recovered dead in the preceding interval.
Missing covariate values are NaN in memory and ``NA`` on disk.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Malformed input file; the message carries ``path:line``."""


@dataclass(frozen=True)
class EncounterHistory:
    """One individual's codes and covariate record over occasions ``1..T``."""

    codes: np.ndarray
    covariates: np.ndarray = None
    id: str = ""
    age_at_first: int = 0

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=int)
        object.__setattr__(self, "codes", codes)
        cov = self.covariates
        cov = np.full(codes.size, np.nan) if cov is None else np.asarray(cov, dtype=float)
        object.__setattr__(self, "covariates", cov)
        if codes.ndim != 1 or cov.shape != codes.shape:
            raise ValueError("codes and covariates must be 1-d arrays of equal length")
        if np.any((codes < 0) | (codes > 2)):
            raise ValueError(f"history {self.id!r}: codes must be in {{0, 1, 2}}")
        seen = np.flatnonzero(codes == 1)
        if seen.size == 0:
            raise ValueError(f"history {self.id!r}: never seen alive")
        nz = np.flatnonzero(codes)
        if nz[0] != seen[0]:
            raise ValueError(f"history {self.id!r}: first nonzero code must be a live capture")
        dead = np.flatnonzero(codes == 2)
        if dead.size > 1:
            raise ValueError(f"history {self.id!r}: recovered dead more than once")
        if dead.size == 1 and nz[-1] != dead[0]:
            raise ValueError(f"history {self.id!r}: observation after dead recovery")
        if self.age_at_first < 0:
            raise ValueError("age_at_first must be nonnegative")

    @property
    def T(self) -> int:
        return self.codes.size

    @property
    def first_capture(self) -> int:
        return int(np.flatnonzero(self.codes == 1)[0]) + 1

    @property
    def recovered(self) -> bool:
        return bool(np.any(self.codes == 2))

    @property
    def recovery_occasion(self) -> int | None:
        d = np.flatnonzero(self.codes == 2)
        return int(d[0]) + 1 if d.size else None

    @property
    def last_alive(self) -> int:
        if self.recovered:
            return self.recovery_occasion - 1
        return int(np.flatnonzero(self.codes == 1)[-1]) + 1

    def age(self, t):
        return self.age_at_first + (np.asarray(t) - self.first_capture)


@dataclass(frozen=True)
class MDArrays:
    """m-array and d-array counts.

    ``m_counts[r-1, s-2]`` holds ``m_{rs}`` for ``s = 2..T`` and the last
    column holds the never-seen-again count ``m_{r,T+1}``;
    ``d_counts[r-1, s-2]`` holds ``d_{rs}``.  ``covariate`` optionally carries a
    global covariate value per occasion.
    """

    m_counts: np.ndarray
    d_counts: np.ndarray = None
    covariate: np.ndarray | None = None
    releases: np.ndarray = field(default=None)

    def __post_init__(self):
        m = np.asarray(self.m_counts, dtype=float)
        T = m.shape[1]
        if m.ndim != 2 or m.shape[0] != T - 1:
            raise ValueError(f"m-array must have shape (T-1, T), got {m.shape}")
        d = np.zeros((T - 1, T - 1)) if self.d_counts is None else np.asarray(self.d_counts, float)
        if d.shape != (T - 1, T - 1):
            raise ValueError(f"d-array must have shape {(T - 1, T - 1)}, got {d.shape}")
        if np.any(m < 0) or np.any(d < 0):
            raise ValueError("counts must be nonnegative")
        lower = np.tril(np.ones((T - 1, T - 1), bool), -1)
        if np.any(m[:, :-1][lower] != 0) or np.any(d[lower] != 0):
            raise ValueError("entries below the diagonal must be zero")
        rel = m.sum(1) + d.sum(1)
        if self.releases is not None:
            given = np.asarray(self.releases, dtype=float)
            if given.shape != rel.shape or np.any(given != rel):
                raise ValueError("releases do not match m-array plus d-array row sums")
        object.__setattr__(self, "m_counts", m)
        object.__setattr__(self, "d_counts", d)
        object.__setattr__(self, "releases", rel)
        if self.covariate is not None:
            cov = np.asarray(self.covariate, dtype=float)
            if cov.shape != (T,):
                raise ValueError(f"global covariate must have length T={T}")
            object.__setattr__(self, "covariate", cov)

    @property
    def T(self) -> int:
        return self.m_counts.shape[1]


def histories_to_arrays(histories: Sequence[EncounterHistory], T: int | None = None) -> MDArrays:
    """Aggregate histories into m-/d-arrays (each live capture before T is a release)."""
    if T is None:
        T = histories[0].T
    m = np.zeros((T - 1, T))
    d = np.zeros((T - 1, T - 1))
    for h in histories:
        codes = h.codes
        live = np.flatnonzero(codes == 1) + 1
        for r in live[live < T]:
            later = np.flatnonzero(codes[r:]) + r + 1
            if later.size == 0:
                m[r - 1, -1] += 1
            else:
                s = later[0]
                if codes[s - 1] == 1:
                    m[r - 1, s - 2] += 1
                else:
                    d[r - 1, s - 2] += 1
    return MDArrays(m, d)


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return "NA" if not np.isfinite(x) else repr(float(x))


def write_histories(path, histories: Sequence[EncounterHistory]) -> None:
    T = histories[0].T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"occ_{t}" for t in range(1, T + 1)] + [f"cov_{t}" for t in range(1, T + 1)])
        for i, h in enumerate(histories):
            w.writerow([h.id or str(i + 1)] + [str(c) for c in h.codes] + [_fmt(v) for v in h.covariates])


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if row and any(cell.strip() for cell in row):
            yield lineno, [cell.strip() for cell in row]


def _number(path, lineno, cell, *, integer=False, allow_na=False):
    if allow_na and cell.upper() in ("NA", ""):
        return np.nan
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: not a number: {cell!r}") from None
    if integer and (v != int(v)):
        raise DataFormatError(f"{path}:{lineno}: expected an integer, got {cell!r}")
    if not allow_na and not np.isfinite(v):
        raise DataFormatError(f"{path}:{lineno}: non-finite value {cell!r}")
    return v


def read_histories(path) -> list[EncounterHistory]:
    rows = list(_rows(path))
    if not rows:
        raise DataFormatError(f"{path}:1: empty file")
    lineno, header = rows[0]
    occ = [c for c in header if c.startswith("occ_")]
    cov = [c for c in header if c.startswith("cov_")]
    T = len(occ)
    expected = ["id"] + [f"occ_{t}" for t in range(1, T + 1)] + [f"cov_{t}" for t in range(1, T + 1)]
    if header != expected or len(cov) != T:
        raise DataFormatError(f"{path}:{lineno}: header must be id,occ_1..occ_T,cov_1..cov_T")
    out = []
    for lineno, row in rows[1:]:
        if len(row) != 1 + 2 * T:
            raise DataFormatError(f"{path}:{lineno}: expected {1 + 2 * T} fields, got {len(row)}")
        codes = [_number(path, lineno, c, integer=True) for c in row[1:T + 1]]
        covs = [_number(path, lineno, c, allow_na=True) for c in row[T + 1:]]
        try:
            out.append(EncounterHistory(np.array(codes, int), np.array(covs), id=row[0]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise DataFormatError(f"{path}: no histories")
    return out


def write_arrays(m_path, d_path, data: MDArrays, cov_path=None) -> None:
    T = data.T
    with open(m_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["release"] + [f"s_{s}" for s in range(2, T + 1)] + ["never"])
        for r in range(1, T):
            w.writerow([r] + [f"{int(x)}" if x == int(x) else repr(x) for x in data.m_counts[r - 1]])
    if d_path is not None:
        with open(d_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["release"] + [f"s_{s}" for s in range(2, T + 1)])
            for r in range(1, T):
                w.writerow([r] + [f"{int(x)}" if x == int(x) else repr(x) for x in data.d_counts[r - 1]])
    if cov_path is not None and data.covariate is not None:
        write_covariate(cov_path, data.covariate)


def write_covariate(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["occasion", "value"])
        for t, v in enumerate(values, start=1):
            w.writerow([t, _fmt(v)])


def _read_count_matrix(path, with_never: bool):
    rows = list(_rows(path))
    if not rows:
        raise DataFormatError(f"{path}:1: empty file")
    lineno, header = rows[0]
    cols = header[1:-1] if with_never else header[1:]
    T = len(cols) + 1
    expected = ["release"] + [f"s_{s}" for s in range(2, T + 1)] + (["never"] if with_never else [])
    if header != expected:
        what = "release,s_2..s_T,never" if with_never else "release,s_2..s_T"
        raise DataFormatError(f"{path}:{lineno}: header must be {what}")
    body = rows[1:]
    if len(body) != T - 1:
        raise DataFormatError(f"{path}: expected {T - 1} release rows, found {len(body)}")
    mat = []
    for k, (lineno, row) in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if _number(path, lineno, row[0], integer=True) != k:
            raise DataFormatError(f"{path}:{lineno}: release occasion should be {k}")
        vals = [_number(path, lineno, c) for c in row[1:]]
        if any(v < 0 for v in vals):
            raise DataFormatError(f"{path}:{lineno}: negative count")
        if any(vals[s] != 0 for s in range(k - 1)):
            raise DataFormatError(f"{path}:{lineno}: nonzero count below the diagonal")
        mat.append(vals)
    return np.array(mat, dtype=float), T


def read_covariate(path, T: int | None = None) -> np.ndarray:
    rows = list(_rows(path))
    if not rows or rows[0][1] != ["occasion", "value"]:
        raise DataFormatError(f"{path}:1: header must be occasion,value")
    vals = []
    for k, (lineno, row) in enumerate(rows[1:], start=1):
        if len(row) != 2 or _number(path, lineno, row[0], integer=True) != k:
            raise DataFormatError(f"{path}:{lineno}: expected 'occasion,value' for occasion {k}")
        vals.append(_number(path, lineno, row[1]))
    if T is not None and len(vals) != T:
        raise DataFormatError(f"{path}: expected {T} occasions, found {len(vals)}")
    return np.array(vals)


def read_arrays(m_path, d_path=None, cov_path=None) -> MDArrays:
    m, T = _read_count_matrix(m_path, with_never=True)
    d = None
    if d_path is not None:
        d, Td = _read_count_matrix(d_path, with_never=False)
        if Td != T:
            raise DataFormatError(f"{d_path}: d-array has T={Td}, m-array has T={T}")
    cov = read_covariate(cov_path, T) if cov_path is not None else None
    return MDArrays(m, d, covariate=cov)


def sniff_kind(path) -> str:
    """``'histories'``, ``'m_array'`` or ``'d_array'`` from a CSV header."""
    for lineno, row in _rows(path):
        if row[0] == "id":
            return "histories"
        if row[0] == "release":
            return "m_array" if row[-1] == "never" else "d_array"
        raise DataFormatError(f"{path}:{lineno}: unrecognized header {row[:3]}")
    raise DataFormatError(f"{path}:1: empty file")


def first_capture_counts(histories: Iterable[EncounterHistory]) -> dict:
    out: dict = {}
    for h in histories:
        out[h.first_capture] = out.get(h.first_capture, 0) + 1
    return out
