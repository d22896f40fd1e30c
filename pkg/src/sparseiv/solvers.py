"""Sparse first-stage regressions.

Objectives use per-observation averages throughout::

    lasso:       Q(b) + (lam / n) * ||b||_1
    sqrt_lasso:  sqrt(Q(b)) + (lam / n) * ||b||_1
    Q(b) = mean((y - F b) ** 2)

Every returned fit carries ``kkt_gap``, the largest violation of the
stationarity conditions of its objective, so optimality is checkable
independently of the algorithm that produced it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .errors import NonConvergence, NotNormalized, PerfectFit, RankDeficient

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 100_000
NORMALIZATION_TOL = 1e-8
PERFECT_FIT_TOL = 1e-14
RANK_COND_LIMIT = 1e12


class Method(str, enum.Enum):
    LASSO = "lasso"
    SQRT_LASSO = "sqrt-lasso"
    POST_LASSO = "post-lasso"
    POST_SQRT_LASSO = "post-sqrt-lasso"

    @property
    def penalized(self):
        return {Method.POST_LASSO: Method.LASSO, Method.POST_SQRT_LASSO: Method.SQRT_LASSO}.get(
            self, self
        )

    @property
    def is_post(self):
        return self in (Method.POST_LASSO, Method.POST_SQRT_LASSO)

    @property
    def is_sqrt(self):
        return self in (Method.SQRT_LASSO, Method.POST_SQRT_LASSO)


class Objective(str, enum.Enum):
    LASSO = "lasso"
    SQRT_LASSO = "sqrt-lasso"


@dataclass(frozen=True)
class SparseCoef:
    beta: np.ndarray
    support: tuple
    method: Method

    @classmethod
    def from_beta(cls, beta, method):
        beta = np.asarray(beta, dtype=float)
        return cls(beta=beta, support=tuple(int(j) for j in np.flatnonzero(beta)), method=method)


@dataclass(frozen=True)
class FirstStageFit:
    coef: SparseCoef
    fitted: np.ndarray
    lam: float
    residual_rms: float
    kkt_gap: float
    iterations: int = 0

    @property
    def beta(self):
        return self.coef.beta

    @property
    def support(self):
        return self.coef.support

    @property
    def empty_support(self):
        return len(self.coef.support) == 0


# --------------------------------------------------------------------------
# coordinate descent kernel


@numba.njit(cache=True)
def _kkt_gap_from_corr(corr, beta, half_pen):
    # corr_j = E_n[f_j r]; lasso stationarity: 2 corr_j = (lam/n) sign(b_j)
    gap = 0.0
    for j in range(beta.shape[0]):
        if beta[j] != 0.0:
            v = abs(corr[j] - half_pen * np.sign(beta[j]))
        else:
            v = abs(corr[j]) - half_pen
        if v > gap:
            gap = v
    return 2.0 * gap


@numba.njit(cache=True)
def _cd_cycle(G, corr, beta, half_pen, active_only):
    max_delta = 0.0
    p = beta.shape[0]
    for j in range(p):
        bj = beta[j]
        if active_only and bj == 0.0:
            continue
        gjj = G[j, j]
        z = corr[j] + gjj * bj
        if z > half_pen:
            nb = (z - half_pen) / gjj
        elif z < -half_pen:
            nb = (z + half_pen) / gjj
        else:
            nb = 0.0
        d = nb - bj
        if d != 0.0:
            beta[j] = nb
            for k in range(p):
                corr[k] -= G[k, j] * d
            ad = abs(d)
            if ad > max_delta:
                max_delta = ad
    return max_delta


@numba.njit(cache=True)
def _cd_lasso(G, corr, beta, half_pen, tol, max_iter):
    """Cyclic coordinate descent with covariance updates.

    Alternates full sweeps with sweeps restricted to the active set. ``corr``
    must equal ``F'(y - F beta)/n`` on entry and is kept in sync.
    Returns (number of full cycles, kkt gap from the running correlations).
    """
    gap = _kkt_gap_from_corr(corr, beta, half_pen)
    it = 0
    while gap > tol and it < max_iter:
        _cd_cycle(G, corr, beta, half_pen, False)
        it += 1
        gap = _kkt_gap_from_corr(corr, beta, half_pen)
        if gap <= tol:
            break
        inner = 0
        while inner < 100:
            delta = _cd_cycle(G, corr, beta, half_pen, True)
            inner += 1
            if delta == 0.0:
                break
            agap = 0.0
            for j in range(beta.shape[0]):
                if beta[j] != 0.0:
                    v = abs(corr[j] - half_pen * np.sign(beta[j]))
                    if v > agap:
                        agap = v
            if 2.0 * agap <= 0.1 * tol:
                break
        gap = _kkt_gap_from_corr(corr, beta, half_pen)
    return it, gap


def _check_normalized(F, gram=None):
    # a supplied Gram matrix carries the mean squares on its diagonal
    ms = np.mean(F**2, axis=0) if gram is None else np.diag(gram)
    dev = np.abs(ms - 1.0)
    j = int(np.argmax(dev)) if dev.size else 0
    if dev.size and dev[j] > NORMALIZATION_TOL:
        raise NotNormalized(j, float(ms[j]))


def _gram(F):
    return F.T @ F / F.shape[0]


def lasso(F, y, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, *, beta_init=None, gram=None):
    """LASSO fit of ``y`` on the normalized design ``F``.

    ``beta_init`` warm-starts the descent and ``gram`` may pass a precomputed
    ``F'F/n``; neither changes the solution, only the work to reach it.

    Raises
    ------
    NotNormalized
        If a column of ``F`` does not have unit mean square.
    NonConvergence
        After ``max_iter`` full cycles; ``.best`` holds the last fit.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = F.shape
    if lam < 0:
        raise ValueError("lam must be non-negative")
    _check_normalized(F, gram)
    G = _gram(F) if gram is None else gram
    beta = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    half_pen = lam / (2.0 * n)

    total = 0
    Fty = F.T @ y / n
    # running correlations drift by rounding; re-derive them from the residual
    # and only accept the certificate computed from scratch
    chunk = 2
    while True:
        corr = Fty - G @ beta
        it, _ = _cd_lasso(G, corr, beta, half_pen, tol, min(max_iter - total, chunk))
        total += max(it, 1)
        corr = F.T @ (y - F @ beta) / n
        gap = float(_kkt_gap_from_corr(corr, beta, half_pen))
        if gap <= tol or total >= max_iter:
            break
        refined = _feature_sign(G, Fty, beta, half_pen, tol, n)
        if refined is not None:
            corr = F.T @ (y - F @ refined) / n
            rgap = float(_kkt_gap_from_corr(corr, refined, half_pen))
            if rgap < gap:
                beta, gap = refined, rgap
                if gap <= tol:
                    break
        chunk = 50
    fit = _make_fit(F, y, beta, Method.LASSO, lam, gap, total)
    if gap > tol:
        raise NonConvergence(max_iter, best=fit, kkt_gap=gap)
    return fit


def _feature_sign(G, Fty, beta, half_pen, tol, n_rows, max_steps=None):
    """Active-set (feature-sign) search for ``min b'Gb/2 - Fty'b + half_pen |b|_1``.

    Each step solves the stationarity equations on the active set with its
    signs fixed, then line-searches the segment towards that solution over
    the points where a coefficient crosses zero. Exact in a handful of steps
    when warm-started, including near-singular active sets where coordinate
    descent crawls. Returns the new coefficients, or None if a solve fails.
    """
    p = beta.shape[0]
    max_steps = 10 * p if max_steps is None else max_steps
    x = beta.copy()

    def value(A, b):
        GA = G[np.ix_(A, A)]
        return 0.5 * b @ GA @ b - Fty[A] @ b + half_pen * np.abs(b).sum()

    for _ in range(max_steps):
        grad = Fty - G @ x
        zero = x == 0.0
        A = np.flatnonzero(~zero)
        viol = np.where(zero, np.abs(grad) - half_pen, 0.0)
        active_ok = A.size == 0 or np.max(np.abs(grad[A] - half_pen * np.sign(x[A]))) <= 0.25 * tol
        if active_ok:
            j = int(np.argmax(viol))
            if viol[j] <= 0.25 * tol:
                return x
            A = np.append(A, j)
            theta = np.sign(x[A])
            theta[-1] = np.sign(grad[j])
        else:
            theta = np.sign(x[A])
        GA = G[np.ix_(A, A)]
        rhs = Fty[A] - half_pen * theta
        start = x[A]
        target = None
        if A.size < n_rows:
            try:
                target = cho_solve(cho_factor(GA), rhs)
            except np.linalg.LinAlgError:
                target = None
        if target is None:
            try:
                ev, V = np.linalg.eigh(GA)
            except np.linalg.LinAlgError:
                return None
            keep = ev > 1e-12 * max(ev[-1], 1e-300)
        if target is None and not keep.all():
            # the fit is constant along a null direction of the active columns,
            # so only the l1 term moves: slide to the first zero crossing if
            # that lowers it
            moved = False
            for d in (V[:, 0], -V[:, 0]):
                nz = start != 0.0
                rate = np.sum(np.sign(start[nz]) * d[nz]) + np.sum(np.abs(d[~nz]))
                hits = nz & (start * d < 0)
                if rate < -1e-12 and hits.any():
                    t = np.min(-start[hits] / d[hits])
                    cand = start + t * d
                    cand[hits & np.isclose(-start / np.where(d == 0, 1, d), t, rtol=1e-12, atol=0)] = 0.0
                    x = x.copy()
                    x[A] = cand
                    moved = True
                    break
            if moved:
                continue
        if target is None:
            target = V[:, keep] @ ((V[:, keep].T @ rhs) / ev[keep])
        if not np.all(np.isfinite(target)):
            return None
        start_val = value(A, start)
        best, best_val = target, value(A, target)
        cross = (start != 0.0) & (np.sign(start) != np.sign(target))
        for i in np.flatnonzero(cross):
            t = start[i] / (start[i] - target[i])
            cand = start + t * (target - start)
            cand[i] = 0.0
            v = value(A, cand)
            if v < best_val:
                best, best_val = cand, v
        # a singular active set can give a target that is not a minimizer;
        # stop rather than climb
        if not best_val < start_val:
            return x
        new = x.copy()
        new[A] = best
        x = new
    return x


def _make_fit(F, y, beta, method, lam, gap, iterations=0):
    fitted = F @ beta
    rms = float(np.sqrt(np.mean((y - fitted) ** 2)))
    return FirstStageFit(
        coef=SparseCoef.from_beta(beta, method),
        fitted=fitted,
        lam=float(lam),
        residual_rms=rms,
        kkt_gap=float(gap),
        iterations=int(iterations),
    )


def sqrt_lasso(
    F, y, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, *, beta_init=None, gram=None, interp=None
):
    """Square-root LASSO via the scaled-LASSO fixed point.

    With ``sigma`` the current residual RMS, the LASSO at penalty
    ``2 * lam * sigma`` shares its stationarity conditions with the square-root
    objective; solve ``sigma = rms(y - F b(sigma))``. A few plain iterations
    come first, then Brent's method on the bracketed fixed point, which stays
    fast when ``sigma`` is close to zero.

    Raises
    ------
    PerfectFit
        If the solution interpolates ``y`` (the square-root objective is not
        differentiable there and the certificate is undefined).
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = F.shape
    _check_normalized(F, gram)
    y_ms = float(np.mean(y**2))
    if y_ms == 0.0:
        raise PerfectFit("y is identically zero")
    # interp: cached interpolation_threshold(F, y); False when known not to apply
    if interp is None and p >= n:
        interp = interpolation_threshold(F, y)
    if interp:
        crit = interp
        if lam <= crit[0]:
            bp = _make_fit(F, y, crit[1], Method.SQRT_LASSO, lam, np.nan)
            raise PerfectFit(
                f"lam={lam:.6g} <= {crit[0]:.6g}: the optimum interpolates y", best=bp
            )
    G = _gram(F) if gram is None else gram
    beta0 = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    state = {"beta": beta0, "fit": None, "total": 0}

    def rms_at(sigma):
        # residual RMS of the LASSO at penalty 2 * lam * sigma
        if sigma**2 < PERFECT_FIT_TOL * y_ms:
            raise PerfectFit(f"residual mean square {sigma**2:.3g} at lam={lam:.6g}")
        budget = max(max_iter - state["total"], 1)
        try:
            fit = lasso(F, y, 2.0 * lam * sigma, max(0.5 * tol * sigma, 1e-15), budget, beta_init=state["beta"], gram=G)
        except NonConvergence as exc:
            fit = exc.best
        state["beta"] = np.array(fit.beta)
        state["fit"] = fit
        state["total"] += fit.iterations
        return fit.residual_rms

    def certified():
        beta = state["beta"]
        return kkt_check(F, y, beta, lam, Objective.SQRT_LASSO), beta

    # plain fixed-point iterations settle easy instances in a few rounds; the
    # iterates decrease towards the largest fixed point
    sigma = float(np.sqrt(np.mean((y - F @ beta0) ** 2)))
    gap = np.inf
    for _ in range(6):
        new_sigma = rms_at(sigma)
        if new_sigma**2 < PERFECT_FIT_TOL * y_ms:
            raise PerfectFit(f"residual mean square {new_sigma**2:.3g} at lam={lam:.6g}")
        gap, beta = certified()
        if gap <= tol:
            return _make_fit(F, y, beta, Method.SQRT_LASSO, lam, gap, state["total"])
        sigma = new_sigma

    # rms_at(s) / s is non-increasing in s, so the fixed point is the unique
    # sign change of rms_at(s) - s; bracket it and hand it to Brent
    hi = sigma
    if rms_at(hi) - hi > 0:
        hi = float(np.sqrt(y_ms))
    lo = 0.5 * hi
    while rms_at(lo) - lo <= 0:
        lo *= 0.25
    sigma = brentq(lambda s_: rms_at(s_) - s_, lo, hi, xtol=1e-15 * hi, rtol=1e-14, maxiter=500)
    for _ in range(20):
        new_sigma = rms_at(sigma)
        gap, beta = certified()
        if gap <= tol or state["total"] >= max_iter:
            break
        sigma = new_sigma
    result = _make_fit(F, y, beta, Method.SQRT_LASSO, lam, gap, state["total"])
    if gap > tol:
        raise NonConvergence(max_iter, best=result, kkt_gap=gap)
    return result


def interpolation_threshold(F, y):
    """Largest ``lam`` at which the square-root LASSO optimum interpolates ``y``.

    Solves basis pursuit ``min ||b||_1 s.t. F b = y`` as a linear program. With
    ``v`` its dual solution (``||F'v||_inf <= 1``), the interpolant is optimal
    for the square-root objective iff ``lam <= sqrt(n) / ||v||_2``.
    Returns ``(threshold, basis_pursuit_beta)``, or None if ``y`` is not in the
    column span of ``F``.
    """
    from scipy.optimize import linprog

    n, p = F.shape
    res = linprog(
        np.ones(2 * p),
        A_eq=np.hstack([F, -F]),
        b_eq=y,
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        return None
    beta = res.x[:p] - res.x[p:]
    if np.sqrt(np.mean((y - F @ beta) ** 2)) > 1e-9 * np.sqrt(np.mean(y**2)):
        return None
    v = res.eqlin.marginals
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return None
    beta[np.abs(beta) < 1e-13 * max(1.0, np.max(np.abs(beta)))] = 0.0
    return float(np.sqrt(n) / norm), beta


def post_ols(F, y, support, method=Method.POST_LASSO):
    """Least squares of ``y`` on the columns of ``F`` listed in ``support``.

    An empty support is a legitimate outcome (nothing selected): the fit is
    identically zero and ``empty_support`` is true.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = F.shape
    support = tuple(sorted(int(j) for j in support))
    beta = np.zeros(p)
    if not support:
        return _make_fit(F, y, beta, method, np.nan, 0.0)
    if len(support) > n:
        raise RankDeficient(support, "more selected columns than observations")
    X = F[:, support]
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > np.sqrt(RANK_COND_LIMIT):
        raise RankDeficient(support)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    beta[list(support)] = coef
    fit = _make_fit(F, y, beta, method, np.nan, 0.0)
    # lstsq can return exact zeros on the support; keep the selected set explicit
    return FirstStageFit(
        coef=SparseCoef(beta=beta, support=support, method=method),
        fitted=fit.fitted,
        lam=fit.lam,
        residual_rms=fit.residual_rms,
        kkt_gap=0.0,
    )


def kkt_check(F, y, beta, lam, objective=Objective.LASSO):
    """Largest violation of the stationarity conditions at ``beta``.

    For the LASSO this is in units of the gradient of ``Q``; for the square-root
    LASSO in units of the gradient of ``sqrt(Q)``. Zero means exactly optimal.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = F.shape[0]
    r = y - F @ beta
    corr = F.T @ r / n
    objective = Objective(objective)
    if objective is Objective.LASSO:
        return float(_kkt_gap_from_corr(corr, beta, lam / (2.0 * n)))
    q = float(np.mean(r**2))
    if q < PERFECT_FIT_TOL * max(float(np.mean(y**2)), np.finfo(float).tiny):
        raise PerfectFit("square-root KKT undefined at zero residual")
    # E_n[f r]/sqrt(Q) = (lam/n) sign(b): reuse the lasso form with a factor 2 removed
    return float(_kkt_gap_from_corr(corr / np.sqrt(q), beta, lam / n)) / 2.0


def objective_value(F, y, beta, lam, objective=Objective.LASSO):
    n = F.shape[0]
    q = float(np.mean((y - F @ beta) ** 2))
    pen = lam / n * float(np.sum(np.abs(beta)))
    if Objective(objective) is Objective.LASSO:
        return q + pen
    return float(np.sqrt(q)) + pen


def lambda_max(F, y, objective=Objective.LASSO):
    """Smallest penalty at which the zero vector is optimal."""
    n = F.shape[0]
    c = np.max(np.abs(F.T @ y)) / n
    if Objective(objective) is Objective.LASSO:
        return 2.0 * n * float(c)
    return n * float(c) / float(np.sqrt(np.mean(np.asarray(y) ** 2)))


@numba.njit(cache=True)
def _lasso_core(F, y, G, Fty, beta, half_pen, tol, max_cycles):
    # a few descent cycles, then the certificate from a fresh residual
    n = F.shape[0]
    corr = Fty - G @ beta
    _cd_lasso(G, corr, beta, half_pen, tol, max_cycles)
    r = y - F @ beta
    corr = F.T @ r / n
    return _kkt_gap_from_corr(corr, beta, half_pen), np.sqrt(np.mean(r * r))


@numba.njit(cache=True)
def _sqrt_lasso_core(F, y, G, Fty, beta, lam, tol, y_ms, max_rounds):
    # scaled-LASSO fixed point; returns the square-root KKT gap, or inf when
    # the residual collapses (no certificate exists there). The penalty scale
    # is Aitken-extrapolated every other round; the gap always uses the
    # actual residual, so acceleration cannot affect the certificate.
    n = F.shape[0]
    r = y - F @ beta
    sigma = np.sqrt(np.mean(r * r))
    s_pen = sigma
    s_old = -1.0
    s_mid = -1.0
    gap = np.inf
    for k in range(max_rounds):
        if sigma * sigma < PERFECT_FIT_TOL * y_ms:
            return np.inf
        corr = Fty - G @ beta
        _cd_lasso(G, corr, beta, lam * s_pen / n, max(0.5 * tol * sigma, 1e-15), 3)
        r = y - F @ beta
        s_old = s_mid
        s_mid = sigma
        sigma = np.sqrt(np.mean(r * r))
        if sigma * sigma < PERFECT_FIT_TOL * y_ms:
            return np.inf
        corr = F.T @ r / n
        gap = _kkt_gap_from_corr(corr / sigma, beta, lam / n) / 2.0
        if gap <= tol:
            break
        s_pen = sigma
        if k % 2 == 1 and s_old > 0.0:
            d1 = s_mid - s_old
            d2 = sigma - s_mid
            den = d2 - d1
            if den != 0.0:
                acc = sigma - d2 * d2 / den
                if 0.5 * sigma < acc < 2.0 * sigma:
                    s_pen = acc
    return gap


def lasso_path(F, y, lams, tol=DEFAULT_TOL, *, gram=None):
    """LASSO coefficients along ``lams`` (any order), warm-started from the
    largest penalty down. Row ``k`` of the result solves penalty ``lams[k]``
    to a KKT gap of at most ``tol``; rows that could not be certified are NaN.
    """
    F = np.ascontiguousarray(F, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, p = F.shape
    _check_normalized(F, gram)
    G = np.ascontiguousarray(_gram(F) if gram is None else gram)
    Fty = F.T @ y / n
    lams = np.asarray(lams, dtype=float)
    out = np.full((lams.size, p), np.nan)
    beta = np.zeros(p)
    for k in np.argsort(-lams):
        trial = beta.copy()
        gap, _ = _lasso_core(F, y, G, Fty, trial, lams[k] / (2.0 * n), tol, 3)
        if gap > tol:
            try:
                trial = np.array(lasso(F, y, lams[k], tol, beta_init=beta, gram=G).beta)
            except NonConvergence:
                continue
        beta = trial
        out[k] = beta
    return out


def sqrt_lasso_path(F, y, lams, tol=DEFAULT_TOL, *, gram=None, interp=None):
    """Square-root LASSO counterpart of :func:`lasso_path`.

    Penalties at which the optimum interpolates ``y`` get the basis-pursuit
    interpolant (no stationarity certificate exists there).
    """
    F = np.ascontiguousarray(F, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, p = F.shape
    _check_normalized(F, gram)
    G = np.ascontiguousarray(_gram(F) if gram is None else gram)
    Fty = F.T @ y / n
    y_ms = float(np.mean(y**2))
    if interp is None:
        interp = interpolation_threshold(F, y) if p >= n else False
    lams = np.asarray(lams, dtype=float)
    out = np.full((lams.size, p), np.nan)
    beta = np.zeros(p)
    for k in np.argsort(-lams):
        lam = lams[k]
        if interp and lam <= interp[0]:
            out[k] = interp[1]
            continue
        # plain scaled-LASSO rounds through the compiled core first
        trial = beta.copy()
        if _sqrt_lasso_core(F, y, G, Fty, trial, lam, tol, y_ms, 30) > tol:
            try:
                trial = np.array(sqrt_lasso(F, y, lam, tol, beta_init=beta, gram=G, interp=interp).beta)
            except PerfectFit as exc:
                if exc.best is None:
                    continue
                trial = np.array(exc.best.beta)
            except NonConvergence:
                continue
        beta = trial
        out[k] = beta
    return out


def fit_first_stage(F, y, method, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, gram=None):
    """Run one of the four sparse estimators; post-variants refit by OLS."""
    method = Method(method)
    if method.is_sqrt:
        pen = sqrt_lasso(F, y, lam, tol, max_iter, gram=gram)
    else:
        pen = lasso(F, y, lam, tol, max_iter, gram=gram)
    if not method.is_post:
        return pen
    post = post_ols(F, y, pen.support, method=method)
    return FirstStageFit(
        coef=post.coef,
        fitted=post.fitted,
        lam=pen.lam,
        residual_rms=post.residual_rms,
        kkt_gap=pen.kkt_gap,
        iterations=pen.iterations,
    )
