"""Simulation designs and the replication harness.

The data-generating process is

    y_i = alpha * d_i + e_i,   d_i = z_i' Pi + v_i,   z_i ~ N(0, Sigma_Z)

with Toeplitz ``Corr(z_ih, z_ij) = rho^|j-h|`` and ``(e_i, v_i)`` jointly
normal. First-stage strength is calibrated through ``F*`` which fixes
``sigma_v^2 = n Pi'Sigma_Z Pi / (F* Pi'Pi)``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import toeplitz

from . import _rng
from .errors import SparseIVError
from .iv import (
    IvEstimate,
    Status,
    critical_value,
    fit_2sls,
    fit_fuller,
    fit_infeasible_oracle_iv,
    fit_split_sample_iv,
    select_instruments,
)
from .model import FirstStageTruth, build_dataset, normalize_columns
from .penalty import DEFAULT_C, PenaltyRule, PenaltySpec
from .solvers import Method


class Design(str, enum.Enum):
    CUTOFF = "cutoff"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class McDesign:
    n: int = 500
    p: int = 100
    design: Design = Design.CUTOFF
    corr_ev: float = 0.3
    f_star: float = 160.0
    sigma_e2: float = 1.0
    sigma_z2: float = 1.0
    alpha_true: float = 1.0
    rho: float = 0.5
    n_reps: int = 500
    rng_seed: int = 0
    c: float = DEFAULT_C
    n_sim: int = 10_000
    k_folds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        if not abs(self.corr_ev) < 1:
            raise ValueError("|corr_ev| must be < 1")
        if not self.sigma_e2 >= 0:
            raise ValueError("sigma_e2 must be non-negative")
        if not self.n_reps >= 1:
            raise ValueError("n_reps must be at least 1")
        if not self.f_star > 0:
            raise ValueError("f_star must be positive")
        if self.design is Design.CUTOFF and self.p < 5:
            raise ValueError("cut-off design needs p >= 5")
        if not self.sigma_v2 > 0:
            raise ValueError("implied sigma_v^2 must be positive")

    @property
    def pi(self):
        return pi_vector(self.design, self.p)

    @property
    def sigma_z(self):
        return self.sigma_z2 * toeplitz(self.rho ** np.arange(self.p))

    @property
    def sigma_v2(self):
        return sigma_v2_from_fstar(self.pi, self.sigma_z, self.n, self.f_star)

    @property
    def error_cov(self):
        se, sv = math.sqrt(self.sigma_e2), math.sqrt(self.sigma_v2)
        cov = self.corr_ev * se * sv
        return np.array([[self.sigma_e2, cov], [cov, self.sigma_v2]])

    def label(self):
        return (
            f"{self.design.value}_n{self.n}_p{self.p}_fstar{self.f_star:g}_corr{self.corr_ev:g}"
        )


def pi_vector(design, p):
    design = Design(design)
    if design is Design.CUTOFF:
        if p < 5:
            raise ValueError("cut-off design needs p >= 5")
        pi = np.zeros(p)
        pi[:5] = 1.0
        return pi
    return 0.7 ** np.arange(p)


def sigma_v2_from_fstar(Pi, Sigma_Z, n, f_star):
    Pi = np.asarray(Pi, dtype=float)
    pp = float(Pi @ Pi)
    if pp == 0.0:
        raise ValueError("Pi must be non-zero")
    return n * float(Pi @ Sigma_Z @ Pi) / (f_star * pp)


def _truth(design: McDesign, z, F, H):
    pi = design.pi
    D = z @ pi
    n = z.shape[0]
    if design.design is Design.CUTOFF:
        beta0 = H * pi
        return FirstStageTruth(D=D, beta0=beta0, s=int(np.count_nonzero(pi)), c_s=0.0)
    # not exactly sparse: keep the leading terms until the tail's RMS
    # contribution to D falls below sigma_v / sqrt(n)
    target = math.sqrt(design.sigma_v2 / n)
    for s in range(1, design.p + 1):
        tail = pi.copy()
        tail[:s] = 0.0
        c_s = float(np.sqrt(np.mean((z @ tail) ** 2)))
        if c_s <= target:
            break
    head = pi.copy()
    head[s:] = 0.0
    return FirstStageTruth(D=D, beta0=H * head, s=s, c_s=c_s)


class _Factors:
    """Cholesky factors per design (computed once per process)."""

    _cache: dict = {}

    @classmethod
    def get(cls, design: McDesign):
        key = (design.p, design.rho, design.sigma_z2, design.corr_ev, design.sigma_e2, design.sigma_v2)
        if key not in cls._cache:
            se, sv = math.sqrt(design.sigma_e2), math.sqrt(design.sigma_v2)
            rho = design.corr_ev
            # written out rather than a Cholesky call so sigma_e2 = 0 works
            Le = np.array([[se, 0.0], [rho * sv, sv * math.sqrt(1.0 - rho**2)]])
            cls._cache[key] = (np.linalg.cholesky(design.sigma_z), Le)
        return cls._cache[key]


def gen_replication(design: McDesign, rep_index):
    """One simulated sample; depends only on ``(design, rep_index)``."""
    rng = _rng.substream(design.rng_seed, _rng.REPLICATION, rep_index)
    Lz, Le = _Factors.get(design)
    z = rng.standard_normal((design.n, design.p)) @ Lz.T
    ev = rng.standard_normal((design.n, 2)) @ Le.T
    e, v = ev[:, 0], ev[:, 1]
    d = z @ design.pi + v
    y = design.alpha_true * d + e
    data = build_dataset(y, d, None, z)
    nd = normalize_columns(z)
    return data, _truth(design, z, nd.F, nd.H)


# --------------------------------------------------------------------------
# estimator roster

_SELECTION = {
    "lasso": (Method.POST_LASSO, PenaltyRule.PLUGIN_LASSO),
    "sqlasso": (Method.POST_SQRT_LASSO, PenaltyRule.PLUGIN_SQRT_LASSO),
    "lasso-cv": (Method.POST_LASSO, PenaltyRule.CROSS_VALIDATION),
    "sqlasso-cv": (Method.POST_SQRT_LASSO, PenaltyRule.CROSS_VALIDATION),
}

ESTIMATORS = (
    "oracle",
    "2sls-all",
    "full-all",
    "iv-lasso",
    "full-lasso",
    "iv-sqlasso",
    "full-sqlasso",
    "iv-lasso-cv",
    "full-lasso-cv",
    "iv-sqlasso-cv",
    "full-sqlasso-cv",
    "split-lasso",
)

DEFAULT_ESTIMATORS = ESTIMATORS


def estimator_label(key, p):
    if key == "oracle":
        return "ORACLE"
    if key.endswith("-all"):
        return f"{key.split('-')[0].upper()}({p})"
    if key == "split-lasso":
        return "IV-LASSO-SPLIT"
    return key.upper()


def _selection_key(key):
    if key.startswith("iv-"):
        return key[3:]
    if key.startswith("full-") and key != "full-all":
        return key[5:]
    return None


def _penalty(design, rule):
    return PenaltySpec(rule=rule, c=design.c, n_sim=design.n_sim, k_folds=design.k_folds)


def replication_seed(design: McDesign, rep_index):
    """Seed for the data-dependent penalty steps of one replication."""
    return int(np.random.SeedSequence([design.rng_seed, rep_index]).generate_state(1)[0])


def run_replication(design: McDesign, rep_index, estimators=DEFAULT_ESTIMATORS):
    """All requested estimates for one replication.

    Returns ``{key: (status, alpha1, se1, n_selected, reason)}``. Estimators
    that use the same selection rule share one first-stage fit.
    """
    data, truth = gen_replication(design, rep_index)
    pen_seed = replication_seed(design, rep_index)
    selections = {}
    out = {}

    def record(key, fn):
        try:
            est = fn()
        except (SparseIVError, np.linalg.LinAlgError, ValueError) as exc:
            out[key] = (Status.FAILED.value, math.nan, math.nan, -1, f"{type(exc).__name__}: {exc}")
            return
        n_sel = est.method.get("n_selected", -1)
        if est.status is Status.OK:
            out[key] = (est.status.value, est.alpha1, est.se1, n_sel, "")
        else:
            out[key] = (est.status.value, math.nan, math.nan, n_sel, est.reason)

    def selected(sel):
        if sel not in selections:
            method, rule = _SELECTION[sel]
            fit, _, keep = select_instruments(data, method, _penalty(design, rule), pen_seed)
            selections[sel] = [int(keep[j]) for j in fit.support]
        return selections[sel]

    def via_selection(sel, second):
        def fn():
            cols = selected(sel)
            if not cols:
                return IvEstimate.no_instruments({"n_selected": 0})
            return second(data, cols)

        return fn

    everything = list(range(data.p))
    for key in estimators:
        if key == "oracle":
            record(key, lambda: fit_infeasible_oracle_iv(data, truth))
        elif key == "2sls-all":
            record(key, lambda: fit_2sls(data, everything))
        elif key == "full-all":
            record(key, lambda: fit_fuller(data, everything))
        elif key == "split-lasso":
            record(
                key,
                lambda: fit_split_sample_iv(
                    data, Method.POST_LASSO, _penalty(design, PenaltyRule.PLUGIN_LASSO), pen_seed
                ),
            )
        else:
            sel = _selection_key(key)
            if sel not in _SELECTION:
                raise ValueError(f"unknown estimator {key!r}")
            second = fit_2sls if key.startswith("iv-") else fit_fuller
            record(key, via_selection(sel, second))
    return out


@dataclass(frozen=True)
class Metrics:
    rmse: float
    med_bias: float
    mad: float
    mean_abs_dev: float
    rp05: float
    n_zero_selected: int = 0
    n_failed: int = 0
    n_used: int = 0


def mc_metrics(estimates, ses, alpha_true, level=0.05):
    """RMSE, median bias, median absolute deviation (about the median
    estimate), mean absolute deviation (about the mean) and the rejection rate
    of the t-test of ``alpha == alpha_true``."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates to summarize")
    ses = np.asarray(ses, dtype=float)
    err = est - alpha_true
    with np.errstate(divide="ignore", invalid="ignore"):
        # a zero standard error with zero error (noiseless designs) is not a rejection
        t = np.abs(err) / ses
    return Metrics(
        rmse=float(np.sqrt(np.mean(err**2))),
        med_bias=float(np.median(err)),
        mad=float(np.median(np.abs(est - np.median(est)))),
        mean_abs_dev=float(np.mean(np.abs(est - np.mean(est)))),
        rp05=float(np.mean(t > critical_value(level))),
        n_used=int(est.size),
    )


_NAN_METRICS = dict(rmse=math.nan, med_bias=math.nan, mad=math.nan, mean_abs_dev=math.nan, rp05=math.nan)


@dataclass
class McResult:
    design: McDesign
    estimators: tuple
    metrics: dict
    records: list = field(repr=False, default_factory=list)
    wall_time: float = 0.0

    def rows(self):
        for key in self.estimators:
            yield estimator_label(key, self.design.p), self.metrics[key]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for label, m in self.rows():
            w.writerow(
                [label]
                + [_fmt(getattr(m, k)) for k in ("rmse", "med_bias", "mad", "rp05")]
                + [m.n_zero_selected, m.n_failed, m.n_used]
            )
        return buf.getvalue()

    def to_dict(self):
        return {
            "design": {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self.design).items()},
            "estimators": {
                label: asdict(m) for label, m in self.rows()
            },
        }

    def audit_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "estimator", "status", "alpha1", "se1", "n_selected", "reason"])
        for rep, res in enumerate(self.records):
            for key in self.estimators:
                status, a, s, k, reason = res[key]
                w.writerow([rep, estimator_label(key, self.design.p), status, _fmt(a), _fmt(s), k, reason])
        return buf.getvalue()

    def table(self):
        head = f"{'estimator':<18}{'RMSE':>9}{'Med.Bias':>10}{'MAD':>9}{'rp(.05)':>9}{'N.zero':>8}{'N.fail':>8}"
        lines = [self.design.label(), head]
        for label, m in self.rows():
            lines.append(
                f"{label:<18}{_f4(m.rmse):>9}{_f4(m.med_bias):>10}{_f4(m.mad):>9}{_f4(m.rp05):>9}"
                f"{m.n_zero_selected:>8}{m.n_failed:>8}"
            )
        return "\n".join(lines)


CSV_COLUMNS = ["estimator", "rmse", "med_bias", "mad", "rp05", "n_zero", "n_failed", "n_used"]


def _fmt(x):
    return format(float(x), ".17g")


def _f4(x):
    return "nan" if math.isnan(x) else f"{x:.4f}"


def aggregate(design: McDesign, estimators, records):
    metrics = {}
    for key in estimators:
        rows = [r[key] for r in records]
        ok = [(a, s) for status, a, s, _, _ in rows if status == Status.OK.value]
        n_zero = sum(1 for r in rows if r[0] == Status.NO_INSTRUMENTS.value)
        n_failed = sum(1 for r in rows if r[0] == Status.FAILED.value)
        if ok:
            est, ses = zip(*ok)
            m = mc_metrics(est, ses, design.alpha_true)
            metrics[key] = Metrics(**{**asdict(m), "n_zero_selected": n_zero, "n_failed": n_failed})
        else:
            metrics[key] = Metrics(**_NAN_METRICS, n_zero_selected=n_zero, n_failed=n_failed, n_used=0)
    return metrics


def _run_chunk(design, reps, estimators):
    from threadpoolctl import threadpool_limits

    # single-threaded BLAS keeps every replication's arithmetic identical
    # whatever the worker count
    with threadpool_limits(limits=1):
        return [run_replication(design, r, estimators) for r in reps]


def run_cell(design: McDesign, estimators=DEFAULT_ESTIMATORS, jobs=1, progress=None):
    """Run ``design.n_reps`` replications and aggregate in replication order."""
    estimators = tuple(estimators)
    for key in estimators:
        if key not in ESTIMATORS:
            raise ValueError(f"unknown estimator {key!r}; choose from {', '.join(ESTIMATORS)}")
    start = time.perf_counter()
    reps = list(range(design.n_reps))
    if jobs <= 1:
        records = []
        for r in reps:
            records.extend(_run_chunk(design, [r], estimators))
            if progress:
                progress(r + 1, design.n_reps)
    else:
        from joblib import Parallel, delayed

        chunks = [reps[i :: jobs] for i in range(jobs)]
        results = Parallel(n_jobs=jobs)(delayed(_run_chunk)(design, c, estimators) for c in chunks)
        by_rep = {}
        for chunk, res in zip(chunks, results):
            by_rep.update(zip(chunk, res))
        records = [by_rep[r] for r in reps]
    metrics = aggregate(design, estimators, records)
    return McResult(
        design=design,
        estimators=estimators,
        metrics=metrics,
        records=records,
        wall_time=time.perf_counter() - start,
    )


def standard_grid(n_reps=500, rng_seed=0, **overrides):
    """The 24 cells: two designs, n in {101, 500}, Corr(e,v) in {.3, .6}, F* in {10, 40, 160}."""
    cells = []
    for design in Design:
        for n in (101, 500):
            for corr in (0.3, 0.6):
                for f_star in (10.0, 40.0, 160.0):
                    cells.append(
                        McDesign(
                            n=n, design=design, corr_ev=corr, f_star=f_star, n_reps=n_reps,
                            rng_seed=rng_seed, **overrides,
                        )
                    )
    return cells
