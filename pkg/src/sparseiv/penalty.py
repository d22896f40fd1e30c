"""Data-driven penalty levels for the first-stage regressions."""
from __future__ import annotations

import enum
import hashlib
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from . import _rng
from .errors import NonConvergence, RankDeficient, ZeroColumn
from .model import normalize_columns
from .solvers import Objective, lambda_max, lasso, lasso_path, post_ols, sqrt_lasso_path

DEFAULT_C = 1.1
DEFAULT_N_SIM = 10_000
SIM_BLOCK = 500
SIGMA_FLOOR = 1e-8


class PenaltyRule(str, enum.Enum):
    PLUGIN_LASSO = "plugin-lasso"
    PLUGIN_SQRT_LASSO = "plugin-sqrt-lasso"
    CROSS_VALIDATION = "cv"


@dataclass(frozen=True)
class PenaltySpec:
    rule: PenaltyRule
    c: float = DEFAULT_C
    gamma: float | None = None
    n_sim: int = DEFAULT_N_SIM
    lam: float | None = None
    sigma_v_used: float | None = None
    quantile: float | None = None
    k_folds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "rule", PenaltyRule(self.rule))
        if self.rule is PenaltyRule.PLUGIN_SQRT_LASSO and self.sigma_v_used is not None:
            raise ValueError("the square-root LASSO rule does not use sigma_v")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"resolved lambda must be positive, got {self.lam}")

    def gamma_for(self, p):
        return 1.0 / p if self.gamma is None else self.gamma


def _nearest_rank(values, level):
    # ceil(level * n)-th order statistic; the epsilon guards e.g. 0.99 * 10000
    k = math.ceil(level * values.size - 1e-9)
    k = min(max(k, 1), values.size)
    return float(np.partition(values, k - 1)[k - 1])


# the LASSO and square-root rules share draws; keep the last few designs
_SIM_CACHE: dict = {}


def simulate_score_stats(F, n_sim=DEFAULT_N_SIM, rng_seed=0):
    """Draws of ``max_j |sum_i f_ij g_i|`` and of the same divided by
    ``sqrt(mean(g**2))``, with ``g`` i.i.d. N(0, 1).

    Draws come in fixed blocks, each from its own keyed substream, so the
    values do not depend on how blocks are scheduled.
    """
    F = np.ascontiguousarray(F, dtype=float)
    key = (hashlib.blake2b(F.tobytes(), digest_size=16).digest(), F.shape, n_sim, rng_seed)
    hit = _SIM_CACHE.get(key)
    if hit is not None:
        return hit[0].copy(), hit[1].copy()
    n = F.shape[0]
    lasso_stat = np.empty(n_sim)
    sqrt_stat = np.empty(n_sim)
    for b, start in enumerate(range(0, n_sim, SIM_BLOCK)):
        m = min(SIM_BLOCK, n_sim - start)
        g = _rng.substream(rng_seed, _rng.SCORE_SIM, b).standard_normal((m, n))
        sup = np.max(np.abs(g @ F), axis=1)
        lasso_stat[start : start + m] = sup
        sqrt_stat[start : start + m] = sup / np.sqrt(np.mean(g**2, axis=1))
    if len(_SIM_CACHE) >= 8:
        _SIM_CACHE.pop(next(iter(_SIM_CACHE)))
    _SIM_CACHE[key] = (lasso_stat.copy(), sqrt_stat.copy())
    return lasso_stat, sqrt_stat


def _check_sim(gamma, n_sim):
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if n_sim < 1000:
        raise ValueError(f"n_sim must be at least 1000, got {n_sim}")


def simulate_score_quantile_lasso(F, gamma, n_sim=DEFAULT_N_SIM, rng_seed=0):
    """(1 - gamma)-quantile of ``n * ||E_n[f_i g_i]||_inf`` given ``F``.

    Each coordinate is exactly normal with variance ``n E_n[f_j^2]``, so the
    union bound caps the true quantile; the simulated value is clipped there,
    which can only move it closer to the truth.
    """
    _check_sim(gamma, n_sim)
    stat, _ = simulate_score_stats(F, n_sim, rng_seed)
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    # a column repeated, possibly with flipped sign, adds nothing to the max
    signs = np.sign(F[np.argmax(np.abs(F), axis=0), np.arange(F.shape[1])])
    p_distinct = np.unique((F * signs).T, axis=0).shape[0]
    ms = float(np.max(np.mean(F**2, axis=0)))
    if abs(ms - 1.0) <= 1e-12:
        ms = 1.0  # normalized design: match analytic_bounds to the last bit
    cap = math.sqrt(n) * float(norm.ppf(1.0 - gamma / (2.0 * p_distinct))) * math.sqrt(ms)
    return min(_nearest_rank(stat, 1.0 - gamma), cap)


def simulate_score_quantile_sqrt_lasso(F, gamma, n_sim=DEFAULT_N_SIM, rng_seed=0):
    _check_sim(gamma, n_sim)
    _, stat = simulate_score_stats(F, n_sim, rng_seed)
    return _nearest_rank(stat, 1.0 - gamma)


def analytic_bounds(n, p, gamma):
    """The two upper bounds on the LASSO score quantile:
    ``sqrt(n) * Phi^{-1}(1 - gamma / (2p))`` and ``sqrt(2 n log(p / gamma))``."""
    return (
        math.sqrt(n) * float(norm.ppf(1.0 - gamma / (2.0 * p))),
        math.sqrt(2.0 * n * math.log(p / gamma)),
    )


def plugin_lambda_lasso(F, sigma_v, c=DEFAULT_C, gamma=None, n_sim=DEFAULT_N_SIM, rng_seed=0):
    """``lam = c * 2 * sigma_v * Lambda(1 - gamma | F)``; ``gamma`` defaults to 1/p."""
    if not sigma_v > 0:
        raise ValueError(f"sigma_v must be positive, got {sigma_v}")
    p = np.shape(F)[1]
    gamma = 1.0 / p if gamma is None else gamma
    q = simulate_score_quantile_lasso(F, gamma, n_sim, rng_seed)
    return PenaltySpec(
        rule=PenaltyRule.PLUGIN_LASSO,
        c=c,
        gamma=gamma,
        n_sim=n_sim,
        lam=c * 2.0 * sigma_v * q,
        sigma_v_used=float(sigma_v),
        quantile=q,
    )


def plugin_lambda_sqrt_lasso(F, c=DEFAULT_C, gamma=None, n_sim=DEFAULT_N_SIM, rng_seed=0):
    """``lam = c * Lambda~(1 - gamma | F)``. Depends on the design only."""
    p = np.shape(F)[1]
    gamma = 1.0 / p if gamma is None else gamma
    q = simulate_score_quantile_sqrt_lasso(F, gamma, n_sim, rng_seed)
    return PenaltySpec(
        rule=PenaltyRule.PLUGIN_SQRT_LASSO, c=c, gamma=gamma, n_sim=n_sim, lam=c * q, quantile=q
    )


def penalty_dominance_rate(F, sigma_v, c, gamma, penalty: PenaltySpec, n_rep=2000, rng_seed=0):
    """Share of fresh noise draws ``v ~ N(0, sigma_v^2)`` for which the penalty
    dominates the score: ``lam >= c * n * ||S||_inf``.

    ``S = 2 E_n[f_i v_i]`` for the LASSO rules and
    ``E_n[f_i v_i] / sqrt(E_n[v_i^2])`` for the square-root rule.
    ``gamma`` is kept for signature symmetry with the plug-in rules; the event
    itself does not involve it.
    """
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    lam = 0.0 if penalty.lam is None else penalty.lam
    hits = 0
    for b, start in enumerate(range(0, n_rep, SIM_BLOCK)):
        m = min(SIM_BLOCK, n_rep - start)
        v = sigma_v * _rng.substream(rng_seed, _rng.DOMINANCE, b).standard_normal((m, n))
        sup = np.max(np.abs(v @ F), axis=1) / n
        if penalty.rule is PenaltyRule.PLUGIN_SQRT_LASSO:
            score = sup / np.sqrt(np.mean(v**2, axis=1))
        else:
            score = 2.0 * sup
        hits += int(np.sum(lam >= c * n * score))
    return hits / n_rep


@dataclass(frozen=True)
class SigmaEstimate:
    sigma: float
    rounds: int
    converged: bool
    support: tuple
    lam: float


def estimate_sigma_v(
    F, y, c=DEFAULT_C, gamma=None, n_sim=DEFAULT_N_SIM, rng_seed=0, max_rounds=15, rel_tol=1e-3,
    details=False, quantile=None,
):
    """Iterated post-LASSO estimate of the first-stage noise level.

    Start from the RMS of ``y``; each round sets the plug-in penalty with the
    current value, refits post-LASSO and takes the residual RMS inflated by
    ``sqrt(n / (n - s_hat))``. The score quantile is simulated once, since it
    depends on ``F`` only (pass ``quantile`` to reuse one already simulated).
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = F.shape
    if np.ptp(y) == 0.0:
        raise ValueError("y is constant")
    gamma = 1.0 / p if gamma is None else gamma
    q = simulate_score_quantile_lasso(F, gamma, n_sim, rng_seed) if quantile is None else quantile
    gram = F.T @ F / n

    sigma = max(float(np.sqrt(np.mean(y**2))), SIGMA_FLOOR)
    converged = False
    support = ()
    lam = float("nan")
    beta = None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        lam = c * 2.0 * sigma * q
        try:
            fit = lasso(F, y, lam, beta_init=beta, gram=gram)
        except NonConvergence as exc:
            fit = exc.best
        beta = np.array(fit.beta)
        support = fit.support
        s_hat = len(support)
        try:
            resid_rms = post_ols(F, y, support).residual_rms
        except RankDeficient:
            resid_rms = fit.residual_rms
        dof = n - s_hat
        new = resid_rms * math.sqrt(n / dof) if dof > 0 else resid_rms
        new = max(new, SIGMA_FLOOR)
        change = abs(new - sigma) / sigma
        sigma = new
        if change < rel_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"sigma_v iteration did not settle in {max_rounds} rounds", RuntimeWarning)
    if details:
        return SigmaEstimate(sigma, rounds, converged, tuple(support), lam)
    return sigma


def lambda_grid(F, y, objective=Objective.LASSO, n_lambda=100, ratio=1e-3):
    top = lambda_max(F, y, objective)
    return top * np.logspace(0.0, math.log10(ratio), n_lambda)


def fold_assignment(n, k_folds, rng_seed):
    perm = _rng.substream(rng_seed, _rng.CV_FOLDS).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k_folds
    return folds


def cv_path_errors(F, y, folds, grid, objective=Objective.LASSO):
    """Out-of-fold squared-error sums, shape ``(k_folds, len(grid))``.

    Training columns are re-normalized within the fold and the held-out rows
    scaled by the training scales. The penalty per observation ``lam / n`` is
    kept fixed across sample sizes, so a fold with ``n_k`` training rows is fit
    at ``lam * n_k / n``. Failed fits are recorded as NaN.
    """
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    objective = Objective(objective)
    n = F.shape[0]
    k_folds = int(folds.max()) + 1
    grid = np.asarray(grid, dtype=float)
    errors = np.full((k_folds, len(grid)), np.nan)
    for k in range(k_folds):
        test = folds == k
        train = ~test
        n_tr = int(train.sum())
        try:
            design = normalize_columns(F[train])
        except ZeroColumn:
            continue
        Ftr, ytr = design.F, y[train]
        Fte = F[test] / design.H
        lams = grid * n_tr / n
        if objective is Objective.LASSO:
            betas = lasso_path(Ftr, ytr, lams)
        else:
            betas = sqrt_lasso_path(Ftr, ytr, lams)
        resid = y[test][:, None] - Fte @ betas.T
        errors[k] = np.sum(resid**2, axis=0)
    return errors


def cross_validate_lambda(
    F, y, k_folds=10, lambda_grid_values=None, rng_seed=0, objective=Objective.LASSO
):
    """Penalty minimizing the mean out-of-fold squared prediction error of the
    penalized fit. Grid points that fail on any fold are dropped."""
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    if k_folds < 2:
        raise ValueError("need at least two folds")
    grid = (
        lambda_grid(F, y, objective)
        if lambda_grid_values is None
        else np.asarray(lambda_grid_values, dtype=float)
    )
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    folds = fold_assignment(F.shape[0], k_folds, rng_seed)
    errors = cv_path_errors(F, y, folds, grid, objective)
    ok = ~np.any(np.isnan(errors), axis=0)
    if not ok.any():
        raise NonConvergence(0, kkt_gap=float("nan"))
    mse = np.where(ok, errors.sum(axis=0) / F.shape[0], np.inf)
    best = int(np.argmin(mse))
    return PenaltySpec(rule=PenaltyRule.CROSS_VALIDATION, lam=float(grid[best]), k_folds=k_folds)


def resolve(spec: PenaltySpec, F, y, objective=Objective.LASSO, rng_seed=0, sigma_v=None):
    """Return ``spec`` with ``lam`` computed for the design ``F`` (and ``y``
    where the rule needs it). A plug-in LASSO rule without a known ``sigma_v``
    estimates it with :func:`estimate_sigma_v`."""
    p = np.shape(F)[1]
    gamma = spec.gamma_for(p)
    if spec.rule is PenaltyRule.PLUGIN_SQRT_LASSO:
        return plugin_lambda_sqrt_lasso(F, spec.c, gamma, spec.n_sim, rng_seed)
    if spec.rule is PenaltyRule.PLUGIN_LASSO:
        sv = sigma_v if sigma_v is not None else spec.sigma_v_used
        q = simulate_score_quantile_lasso(F, gamma, spec.n_sim, rng_seed)
        if sv is None:
            sv = estimate_sigma_v(F, y, spec.c, gamma, spec.n_sim, rng_seed, quantile=q)
        return replace(
            spec, gamma=gamma, lam=spec.c * 2.0 * sv * q, sigma_v_used=float(sv), quantile=q
        )
    out = cross_validate_lambda(F, y, spec.k_folds, None, rng_seed, objective)
    return replace(spec, lam=out.lam)
