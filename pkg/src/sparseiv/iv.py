"""Second-stage IV estimators.

All estimators share the algebra

    alpha = E_n[A d']^{-1} E_n[A y1],   A = (instrument, w')',  d = (y2, w')'

and differ only in how the instrument for ``y2`` is formed.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import _rng
from .errors import (
    EigenFailure,
    RankDeficient,
    SingularSystem,
    SparseIVError,
    ZeroColumn,
)
from .model import FirstStageTruth, IvDataset, normalize_columns
from .penalty import PenaltySpec, resolve
from .solvers import FirstStageFit, Method, Objective, fit_first_stage

COND_LIMIT = 1e12


class Status(str, enum.Enum):
    OK = "ok"
    NO_INSTRUMENTS = "no-instruments-selected"
    FAILED = "failed"


class ResidualBasis(str, enum.Enum):
    STRUCTURAL = "structural"  # y1 - d'alpha
    INSTRUMENT = "instrument"  # y1 - A'alpha


@dataclass(frozen=True)
class IvEstimate:
    alpha: np.ndarray | None
    cov: np.ndarray | None
    sigma_eps_hat: float | None
    Q_hat: np.ndarray | None
    method: dict = field(default_factory=dict)
    status: Status = Status.OK
    reason: str = ""

    @property
    def se(self):
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def ok(self):
        return self.status is Status.OK

    @property
    def alpha1(self):
        return float(self.alpha[0]) if self.alpha is not None else float("nan")

    @property
    def se1(self):
        return float(self.se[0]) if self.cov is not None else float("nan")

    @classmethod
    def no_instruments(cls, method):
        return cls(None, None, None, None, method, Status.NO_INSTRUMENTS, "no instruments selected")

    @classmethod
    def failed(cls, method, reason):
        return cls(None, None, None, None, method, Status.FAILED, reason)


def _solve(M, b, what):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(cond, what)
    return np.linalg.solve(M, b)


def _inv(M, what):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(cond, what)
    return np.linalg.inv(M)


def _regressors(data: IvDataset):
    return np.column_stack([data.y2, data.W])


def estimate_variance(data: IvDataset, alpha, A, residual_basis=ResidualBasis.STRUCTURAL):
    """``sigma2 = E_n[resid^2]`` and ``cov = sigma2 * E_n[A A']^{-1} / n``."""
    n = data.n
    basis = ResidualBasis(residual_basis)
    X = _regressors(data) if basis is ResidualBasis.STRUCTURAL else A
    resid = data.y1 - X @ alpha
    sigma2 = float(np.mean(resid**2))
    Q = A.T @ A / n
    cov = sigma2 * _inv(Q, "E_n[A A']") / n
    cov = 0.5 * (cov + cov.T)
    return sigma2, cov, Q


def _iv_with_instrument(data: IvDataset, D_hat, method, residual_basis=ResidualBasis.STRUCTURAL):
    n = data.n
    A = np.column_stack([D_hat, data.W])
    d = _regressors(data)
    alpha = _solve(A.T @ d / n, A.T @ data.y1 / n, "E_n[A d']")
    sigma2, cov, Q = estimate_variance(data, alpha, A, residual_basis)
    return IvEstimate(alpha=alpha, cov=cov, sigma_eps_hat=math.sqrt(sigma2), Q_hat=Q, method=method)


def fit_optimal_iv(data: IvDataset, first_stage: FirstStageFit, residual_basis=ResidualBasis.STRUCTURAL):
    """IV with the first-stage fitted values as the instrument for ``y2``.

    An empty first-stage support gives status ``NO_INSTRUMENTS``; a singular
    moment matrix raises :class:`SingularSystem`.
    """
    method = {
        "estimator": "optimal-iv",
        "first_stage": first_stage.coef.method.value,
        "lambda": first_stage.lam,
        "n_selected": len(first_stage.support),
    }
    if first_stage.empty_support:
        return IvEstimate.no_instruments(method)
    if first_stage.fitted.shape != (data.n,):
        raise ValueError("first-stage fitted values do not match the sample size")
    return _iv_with_instrument(data, first_stage.fitted, method, residual_basis)


def fit_infeasible_oracle_iv(data: IvDataset, truth: FirstStageTruth, residual_basis=ResidualBasis.STRUCTURAL):
    method = {"estimator": "oracle-iv", "first_stage": "truth", "n_selected": truth.s}
    return _iv_with_instrument(data, truth.D, method, residual_basis)


def _instrument_matrix(data: IvDataset, instrument_columns):
    cols = sorted(int(j) for j in instrument_columns)
    Z = np.column_stack([data.F_raw[:, cols], data.W])
    if Z.shape[1] > data.n:
        raise RankDeficient(cols, "more instruments than observations")
    if Z.shape[1]:
        sv = np.linalg.svd(Z, compute_uv=False)
        if sv[-1] <= 0 or (sv[0] / sv[-1]) ** 2 > COND_LIMIT:
            raise RankDeficient(cols, "instrument matrix [F_sel, W] is rank deficient")
    return cols, Z


def fit_2sls(data: IvDataset, instrument_columns):
    """Two-stage least squares with the listed instrument columns plus ``W``.
    Standard errors are the conventional homoskedastic ones."""
    cols, Z = _instrument_matrix(data, instrument_columns)
    method = {"estimator": "2sls", "n_selected": len(cols)}
    if not cols:
        return IvEstimate.no_instruments(method)
    Qz, _ = np.linalg.qr(Z)
    D_hat = Qz @ (Qz.T @ data.y2)
    return _iv_with_instrument(data, D_hat, method)


def liml_ratio(data: IvDataset, instrument_columns):
    """Smallest root of ``|Y'(P_Z - P_W)Y - l Y'M_Z Y| = 0`` with ``Y = [y1, y2]``.

    This is the LIML eigenvalue in ratio form (zero under exact
    identification); the usual ``kappa`` equals ``1 + l``.
    """
    _, Z = _instrument_matrix(data, instrument_columns)
    Y = np.column_stack([data.y1, data.y2])
    Qz, _ = np.linalg.qr(Z)
    PY = Qz @ (Qz.T @ Y)
    if data.k_w:
        Qw, _ = np.linalg.qr(data.W)
        PwY = Qw @ (Qw.T @ Y)
    else:
        PwY = np.zeros_like(Y)
    A = Y.T @ (PY - PwY)
    B = Y.T @ (Y - PY)
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    # det(A - l B) is a quadratic in l; solving it directly stays well defined
    # when B is singular (n - K = 1 leaves a one-dimensional residual space)
    coeffs = [
        np.linalg.det(B),
        -(A[0, 0] * B[1, 1] + A[1, 1] * B[0, 0] - 2.0 * A[0, 1] * B[0, 1]),
        np.linalg.det(A),
    ]
    if abs(coeffs[0]) <= 1e-10 * np.trace(B) ** 2:
        coeffs[0] = 0.0  # singular B: det(B) is rounding noise, one finite root
    scale = max(abs(c) for c in coeffs)
    if not np.isfinite(scale) or scale == 0.0:
        raise EigenFailure("LIML eigenproblem is degenerate")
    roots = np.roots([c / scale for c in coeffs])
    real = roots[np.abs(roots.imag) <= 1e-9 * np.maximum(1.0, np.abs(roots.real))].real
    if real.size == 0:
        raise EigenFailure("LIML eigenproblem has no real root")
    return float(max(real.min(), 0.0))


def fit_fuller(data: IvDataset, instrument_columns, C=1.0):
    """Fuller's modified LIML with many-instrument-robust standard errors.

    The k-class parameter in ratio form is ``l_LIML - C / (n - K)`` with ``K``
    the number of instruments including controls (``C = 0`` gives LIML). The
    variance is the Bekker-type sandwich that stays valid with many instruments::

        u = y1 - X a,  s2 = u'u / (n - G),  t = u'P u / u'u
        Xt = X - u (u'X) / (u'u)
        H = X'P X - t X'X
        S = s2 * ((1 - t)^2 Xt'P Xt + t^2 Xt'(I - P) Xt)
        V = H^{-1} S H^{-1}

    ``t`` is the data analogue of the instrument ratio K/n; it is what makes
    the variance valid when K grows with n.
    """
    cols, Z = _instrument_matrix(data, instrument_columns)
    n = data.n
    K = Z.shape[1]
    method = {"estimator": "fuller", "C": float(C), "n_selected": len(cols)}
    if not cols:
        return IvEstimate.no_instruments(method)
    if K >= n:
        raise RankDeficient(cols, "Fuller needs fewer instruments than observations")
    l_liml = liml_ratio(data, cols)
    l_full = l_liml - C / (n - K)
    method["liml_ratio"] = l_liml

    X = _regressors(data)
    G = X.shape[1]
    Qz, _ = np.linalg.qr(Z)

    def proj(v):
        return Qz @ (Qz.T @ v)

    PX = proj(X)
    MX = X - PX
    Py1 = proj(data.y1)
    lhs = X.T @ PX - l_full * (X.T @ MX)
    rhs = X.T @ Py1 - l_full * (X.T @ (data.y1 - Py1))
    alpha = _solve(lhs, rhs, "Fuller normal equations")

    u = data.y1 - X @ alpha
    uu = float(u @ u)
    Pu = proj(u)
    t = float(u @ Pu) / uu
    s2 = uu / (n - G)
    Xt = X - np.outer(u, u @ X) / uu
    PXt = proj(Xt)
    H = X.T @ PX - t * (X.T @ X)
    S = s2 * ((1 - t) ** 2 * (Xt.T @ PXt) + t**2 * (Xt.T @ (Xt - PXt)))
    Hinv = _inv(H, "Fuller Hessian")
    cov = Hinv @ S @ Hinv
    cov = 0.5 * (cov + cov.T)
    A = np.column_stack([PX[:, 0], data.W])
    return IvEstimate(
        alpha=alpha,
        cov=cov,
        sigma_eps_hat=math.sqrt(s2),
        Q_hat=A.T @ A / n,
        method=method,
    )


def wald_test(estimate: IvEstimate, null_value, level=0.05):
    """t-test of ``alpha_1 == null_value``; returns ``(t, reject)``."""
    if not estimate.ok:
        raise ValueError(f"cannot test an estimate with status {estimate.status.value}")
    t = (estimate.alpha1 - null_value) / estimate.se1
    return t, bool(abs(t) > critical_value(level))


def critical_value(level=0.05):
    return float(norm.ppf(1.0 - level / 2.0))


# --------------------------------------------------------------------------
# first stage + second stage pipelines


def partial_out_controls(data: IvDataset):
    """Residualize ``y2`` and the instruments on ``W`` (controls are left
    unpenalized). Instrument columns that vanish are dropped; returns the
    residualized ``y2``, instrument block and the kept column indices."""
    if data.k_w == 0:
        return data.y2, data.F_raw, np.arange(data.p)
    Qw, _ = np.linalg.qr(data.W)
    y2 = data.y2 - Qw @ (Qw.T @ data.y2)
    F = data.F_raw - Qw @ (Qw.T @ data.F_raw)
    scale = np.sqrt(np.mean(data.F_raw**2, axis=0))
    keep = np.flatnonzero(np.sqrt(np.mean(F**2, axis=0)) > 1e-7 * scale)
    return y2, F[:, keep], keep


def _objective_for(method: Method):
    return Objective.SQRT_LASSO if method.is_sqrt else Objective.LASSO


def select_instruments(data: IvDataset, method, penalty: PenaltySpec, rng_seed=0, sigma_v=None):
    """Fit the sparse first stage on the full sample.

    Returns ``(fit, resolved_penalty, columns)`` where ``fit.support`` indexes
    ``columns`` (indices into ``data.F_raw``).
    """
    method = Method(method)
    y2, F_raw, keep = partial_out_controls(data)
    design = normalize_columns(F_raw)
    spec = resolve(penalty, design.F, y2, _objective_for(method), rng_seed, sigma_v=sigma_v)
    fit = fit_first_stage(design.F, y2, method, spec.lam)
    return fit, spec, keep


def fit_sparse_iv(
    data: IvDataset, method, penalty: PenaltySpec, rng_seed=0, second_stage="2sls", sigma_v=None
):
    """Sparse first stage followed by a second stage.

    ``second_stage`` is ``"optimal"`` (the first-stage fit itself is the
    instrument), ``"2sls"`` or ``"fuller"`` (run on the selected columns).
    """
    method = Method(method)
    fit, spec, keep = select_instruments(data, method, penalty, rng_seed, sigma_v)
    selected = [int(keep[j]) for j in fit.support]
    info = {
        "first_stage": method.value,
        "penalty": spec.rule.value,
        "lambda": spec.lam,
        "n_selected": len(selected),
        "selected": selected,
    }
    if not selected:
        return IvEstimate.no_instruments({"estimator": second_stage, **info})
    if second_stage == "optimal":
        est = fit_optimal_iv(data, fit)
    elif second_stage == "2sls":
        est = fit_2sls(data, selected)
    elif second_stage == "fuller":
        est = fit_fuller(data, selected)
    else:
        raise ValueError(f"unknown second stage {second_stage!r}")
    return IvEstimate(
        est.alpha, est.cov, est.sigma_eps_hat, est.Q_hat, {**est.method, **info}, est.status, est.reason
    )


def split_halves(n, rng_seed):
    """Random split with the first ``ceil(n/2)`` permuted indices in half a."""
    perm = _rng.substream(rng_seed, _rng.SPLIT).permutation(n)
    n_a = (n + 1) // 2
    return np.sort(perm[:n_a]), np.sort(perm[n_a:])


def _half_first_stage(data, rows, method, penalty, rng_seed, sigma_v):
    sub = data.subset(rows)
    y2, F_raw, keep = partial_out_controls(sub)
    if keep.size != data.p:
        raise ZeroColumn(int(np.setdiff1d(np.arange(data.p), keep)[0]))
    design = normalize_columns(F_raw)
    spec = resolve(penalty, design.F, y2, _objective_for(method), rng_seed, sigma_v=sigma_v)
    fit = fit_first_stage(design.F, y2, method, spec.lam)
    return fit, design.H, spec


def fit_split_sample_iv(
    data: IvDataset, method, penalty: PenaltySpec, rng_seed=0, *, halves=None, sigma_v=None
):
    """Cross-fitted IV: instruments for each half come from the coefficients
    estimated on the other half, then the two half estimates are pooled with
    weights ``n_k E_{n_k}[A A']``.

    Both halves resolve their penalty with the same seed so the result does not
    depend on which half is called ``a``. A half whose instrument is
    identically zero (the other half selected nothing) gets zero weight; if
    both are empty the status is ``NO_INSTRUMENTS``.
    """
    method = Method(method)
    n = data.n
    if n < 4:
        raise ValueError("split-sample IV needs n >= 4")
    if halves is None:
        halves = split_halves(n, rng_seed)
    labels = ("a", "b")
    info = {"estimator": "split-sample-iv", "first_stage": method.value, "penalty": penalty.rule.value}

    fits = {}
    for label, rows in zip(labels, halves):
        try:
            fits[label] = _half_first_stage(data, rows, method, penalty, rng_seed, sigma_v)
        except (SparseIVError, np.linalg.LinAlgError) as exc:
            return IvEstimate.failed(info, f"half {label} first stage: {exc}")

    parts = []
    for label, other, rows in zip(labels, labels[::-1], halves):
        fit_other, H_other, _ = fits[other]
        n_k = len(rows)
        info[f"n_selected_{label}"] = len(fits[label][0].support)
        if fit_other.empty_support:
            continue
        sub = data.subset(rows)
        D_hat = sub.F_raw @ (fit_other.beta / H_other)
        A = np.column_stack([D_hat, sub.W])
        d = _regressors(sub)
        try:
            alpha_k = _solve(A.T @ d / n_k, A.T @ sub.y1 / n_k, f"half {label} E_n[A d']")
        except SingularSystem as exc:
            return IvEstimate.failed(info, f"half {label}: {exc}")
        parts.append((n_k * (A.T @ A / n_k), alpha_k))

    if not parts:
        return IvEstimate.no_instruments(info)
    weight = parts[0][0] if len(parts) == 1 else parts[0][0] + parts[1][0]
    rhs = sum(W_k @ a_k for W_k, a_k in parts)
    try:
        alpha = _solve(weight, rhs, "pooled split-sample weights")
        Q = weight / n
        resid = data.y1 - _regressors(data) @ alpha
        sigma2 = float(np.mean(resid**2))
        cov = sigma2 * _inv(Q, "pooled E_n[A A']") / n
    except SingularSystem as exc:
        return IvEstimate.failed(info, str(exc))
    cov = 0.5 * (cov + cov.T)
    return IvEstimate(alpha=alpha, cov=cov, sigma_eps_hat=math.sqrt(sigma2), Q_hat=Q, method=info)
