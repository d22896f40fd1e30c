"""Domain types for the linear IV model with many technical instruments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroColumn

ZERO_COLUMN_TOL = 1e-14


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NormalizedDesign:
    """Instrument matrix rescaled so every column has empirical mean square one.

    ``F_raw[:, j] == H[j] * F[:, j]``. Columns are not demeaned.
    """

    F: np.ndarray
    H: np.ndarray

    def denormalize(self):
        return self.F * self.H

    @property
    def n(self):
        return self.F.shape[0]

    @property
    def p(self):
        return self.F.shape[1]


def normalize_columns(F_raw) -> NormalizedDesign:
    F_raw = np.asarray(F_raw, dtype=float)
    if F_raw.ndim == 1:
        F_raw = F_raw[:, None]
    ms = np.mean(F_raw**2, axis=0)
    bad = np.flatnonzero(ms < ZERO_COLUMN_TOL)
    if bad.size:
        raise ZeroColumn(int(bad[0]))
    H = np.sqrt(ms)
    return NormalizedDesign(F=_frozen(F_raw / H), H=_frozen(H))


@dataclass(frozen=True)
class IvDataset:
    """Outcome ``y1``, endogenous regressor ``y2``, controls ``W`` and raw
    instruments ``F_raw``. Build with :func:`build_dataset`."""

    y1: np.ndarray
    y2: np.ndarray
    W: np.ndarray
    F_raw: np.ndarray
    instrument_names: tuple = ()
    control_names: tuple = ()

    @property
    def n(self):
        return self.y1.shape[0]

    @property
    def p(self):
        return self.F_raw.shape[1]

    @property
    def k_w(self):
        return self.W.shape[1]

    def normalized(self) -> NormalizedDesign:
        return normalize_columns(self.F_raw)

    def subset(self, rows) -> "IvDataset":
        rows = np.asarray(rows)
        return build_dataset(
            self.y1[rows],
            self.y2[rows],
            self.W[rows],
            self.F_raw[rows],
            instrument_names=self.instrument_names,
            control_names=self.control_names,
        )


def build_dataset(y1, y2, W, F_raw, instrument_names=None, control_names=None) -> IvDataset:
    y1 = np.asarray(y1, dtype=float).ravel()
    y2 = np.asarray(y2, dtype=float).ravel()
    n = y1.shape[0]
    if W is None:
        W = np.empty((n, 0))
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    F_raw = np.asarray(F_raw, dtype=float)
    if F_raw.ndim == 1:
        F_raw = F_raw[:, None]

    lengths = {"y1": n, "y2": y2.shape[0], "W": W.shape[0], "F_raw": F_raw.shape[0]}
    if len(set(lengths.values())) != 1:
        raise DimensionMismatch(f"row counts differ: {lengths}")
    if n < 2:
        raise DimensionMismatch(f"need at least 2 observations, got {n}")
    if F_raw.ndim != 2 or F_raw.shape[1] < 1:
        raise DimensionMismatch("need at least one instrument column")
    ms = np.mean(F_raw**2, axis=0)
    bad = np.flatnonzero(ms < ZERO_COLUMN_TOL)
    if bad.size:
        raise ZeroColumn(int(bad[0]))

    if instrument_names is None:
        instrument_names = tuple(f"z_{j}" for j in range(F_raw.shape[1]))
    if control_names is None:
        control_names = tuple(f"w_{j}" for j in range(W.shape[1]))
    if len(instrument_names) != F_raw.shape[1] or len(control_names) != W.shape[1]:
        raise DimensionMismatch("column name count does not match data")
    return IvDataset(
        y1=_frozen(y1),
        y2=_frozen(y2),
        W=_frozen(W),
        F_raw=_frozen(F_raw),
        instrument_names=tuple(instrument_names),
        control_names=tuple(control_names),
    )


@dataclass(frozen=True)
class FirstStageTruth:
    """True optimal instrument and its sparse approximation (simulation only).

    ``beta0`` is expressed in the coordinates of the *normalized* design, so
    ``D - F @ beta0`` is the approximation error whose RMS is at most ``c_s``.
    """

    D: np.ndarray
    beta0: np.ndarray
    s: int
    c_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def approximation_error(self, F):
        return self.D - F @ self.beta0


def read_csv(path) -> IvDataset:
    """Load a dataset following the ingestion contract.

    Required columns ``y1`` and ``y2``; ``w_*`` columns are controls and
    ``z_*`` columns are instruments (kept in file order).
    """
    import pandas as pd

    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    missing = [c for c in ("y1", "y2") if c not in frame.columns]
    if missing:
        raise DimensionMismatch(f"missing required column(s): {', '.join(missing)}")
    wcols = [c for c in frame.columns if c.startswith("w_")]
    zcols = [c for c in frame.columns if c.startswith("z_")]
    if not zcols:
        raise DimensionMismatch("no instrument columns (prefix 'z_') found")
    used = ["y1", "y2", *wcols, *zcols]
    values = frame[used].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise DimensionMismatch("non-finite or missing values in input")
    return build_dataset(
        frame["y1"].to_numpy(float),
        frame["y2"].to_numpy(float),
        frame[wcols].to_numpy(float) if wcols else None,
        frame[zcols].to_numpy(float),
        instrument_names=tuple(zcols),
        control_names=tuple(wcols),
    )


def write_csv(data: IvDataset, path):
    """Write ``data`` in the ingestion layout at full double precision."""
    import csv

    header = ["y1", "y2", *data.control_names, *data.instrument_names]
    block = np.column_stack([data.y1, data.y2, data.W, data.F_raw])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in block:
            writer.writerow([repr(float(x)) for x in row])
