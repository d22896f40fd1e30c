"""Empirical checks of the Gram-matrix conditions behind the LASSO rates.

Sparse eigenvalues are extreme Rayleigh quotients over ``m``-sparse unit
vectors; the restricted eigenvalue is a minimum over the cone
``||d_{T^c}||_1 <= C ||d_T||_1``. Both are NP-hard in general, so every result
records whether it is exact.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import _rng
from .errors import TooLarge

ENUMERATION_CAP = 1_000_000
_BATCH = 4096


class Mode(str, enum.Enum):
    EXACT = "exact"
    GREEDY = "greedy"


@dataclass(frozen=True)
class GramDiagnostics:
    m: int
    phi_min: float
    phi_max: float
    exact: bool
    # certified intervals containing the true sparse eigenvalues
    phi_min_bounds: tuple = (float("nan"), float("nan"))
    phi_max_bounds: tuple = (float("nan"), float("nan"))
    kappa_hat: float | None = None
    kappa_C: float | None = None
    samples: int = 0
    kappa_exact: bool = False


def gram_matrix(F):
    F = np.asarray(F, dtype=float)
    return F.T @ F / F.shape[0]


def _check_square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("Gram matrix must be square")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Gram matrix must be symmetric")
    return 0.5 * (M + M.T)


def _exact_extremes(M, m):
    p = M.shape[0]
    lo, hi = np.inf, -np.inf
    combos = itertools.combinations(range(p), m)
    while True:
        chunk = list(itertools.islice(combos, _BATCH))
        if not chunk:
            break
        idx = np.array(chunk)
        sub = M[idx[:, :, None], idx[:, None, :]]
        ev = np.linalg.eigvalsh(sub)
        lo = min(lo, float(ev[:, 0].min()))
        hi = max(hi, float(ev[:, -1].max()))
    return lo, hi


def _greedy(M, m, smallest):
    p = M.shape[0]
    diag = np.diag(M)
    chosen = [int(np.argmin(diag) if smallest else np.argmax(diag))]
    while len(chosen) < m:
        best, best_val = None, None
        for j in range(p):
            if j in chosen:
                continue
            idx = chosen + [j]
            ev = np.linalg.eigvalsh(M[np.ix_(idx, idx)])
            val = ev[0] if smallest else ev[-1]
            if best_val is None or (val < best_val if smallest else val > best_val):
                best, best_val = j, val
        chosen.append(best)
    ev = np.linalg.eigvalsh(M[np.ix_(chosen, chosen)])
    return float(ev[0] if smallest else ev[-1])


def _gershgorin(M, m):
    """Per-row bounds valid for every m-subset: an m x m principal submatrix has
    its eigenvalues within diag +- (sum of the m-1 largest off-diagonal |M_ij|)."""
    A = np.abs(M.copy())
    np.fill_diagonal(A, 0.0)
    if m > 1:
        radius = -np.sort(-A, axis=1)[:, : m - 1].sum(axis=1)
    else:
        radius = np.zeros(M.shape[0])
    d = np.diag(M)
    return float(np.min(d - radius)), float(np.max(d + radius))


def sparse_eigenvalues(M, m, mode=Mode.EXACT):
    """Minimal and maximal ``m``-sparse eigenvalues of ``M``.

    ``EXACT`` enumerates every ``m``-column principal submatrix (refusing more
    than a million of them). ``GREEDY`` grows a submatrix by forward selection;
    the greedy values are attained by actual subsets, so they bound the truth
    from the inside, and interlacing plus Gershgorin give the outside bounds.
    """
    M = _check_square(M)
    p = M.shape[0]
    mode = Mode(mode)
    if not 1 <= m <= p:
        raise ValueError(f"m must lie in [1, {p}], got {m}")
    if mode is Mode.EXACT:
        if math.comb(p, m) > ENUMERATION_CAP:
            raise TooLarge(f"C({p}, {m}) = {math.comb(p, m)} subsets exceeds {ENUMERATION_CAP}")
        lo, hi = _exact_extremes(M, m)
        lo = max(lo, 0.0)
        return GramDiagnostics(
            m=m, phi_min=lo, phi_max=hi, exact=True, phi_min_bounds=(lo, lo), phi_max_bounds=(hi, hi)
        )
    g_min = max(_greedy(M, m, True), 0.0)
    g_max = _greedy(M, m, False)
    full = np.linalg.eigvalsh(M)
    gl, gu = _gershgorin(M, m)
    lower = min(max(full[0], gl, 0.0), g_min)
    upper = max(min(full[-1], gu), g_max)
    return GramDiagnostics(
        m=m,
        phi_min=g_min,
        phi_max=g_max,
        exact=False,
        phi_min_bounds=(lower, g_min),
        phi_max_bounds=(g_max, upper),
    )


def _orthant_qp(M, T, Tc, signs, C, x0=None):
    """min d'Md  s.t.  sign-constrained d_T with sum(|d_T|) = 1, ||d_Tc||_1 <= C.

    Variables: x >= 0 (|d_T|), u, w >= 0 with d_Tc = u - w. Convex in this
    parametrization, so SLSQP finds the orthant's minimum.
    """
    s, r = len(T), len(Tc)

    def expand(z):
        d = np.zeros(M.shape[0])
        d[T] = signs * z[:s]
        d[Tc] = z[s : s + r] - z[s + r :]
        return d

    def fun(z):
        d = expand(z)
        Md = M @ d
        g = np.concatenate([signs * Md[T], Md[Tc], -Md[Tc]]) * 2.0
        return float(d @ Md), g

    cons = [
        {"type": "eq", "fun": lambda z: np.sum(z[:s]) - 1.0, "jac": lambda z: np.r_[np.ones(s), np.zeros(2 * r)]},
        {"type": "ineq", "fun": lambda z: C - np.sum(z[s:]), "jac": lambda z: np.r_[np.zeros(s), -np.ones(2 * r)]},
    ]
    if x0 is None:
        x0 = np.r_[np.full(s, 1.0 / s), np.zeros(2 * r)]
    res = minimize(
        fun, x0, jac=True, method="SLSQP", bounds=[(0, None)] * (s + 2 * r), constraints=cons,
        options={"ftol": 1e-12, "maxiter": 500},
    )
    d = expand(res.x)
    l1T = np.sum(np.abs(d[T]))
    return float(d @ M @ d) / l1T**2


def restricted_eigenvalue_estimate(M, T, C, n_samples=200, rng_seed=0):
    """Sampled estimate of the restricted eigenvalue ``kappa_C`` for support ``T``.

    Random directions in the cone pick sign patterns of ``d_T``; each distinct
    pattern is then minimized exactly (a convex problem once the signs are
    fixed). The result is the smallest value found, so it can only overstate
    ``kappa_C``; it is exact when every pattern (up to a global sign) was
    visited, which ``kappa_exact`` records.
    """
    M = _check_square(M)
    p = M.shape[0]
    T = sorted({int(j) for j in T})
    if not T:
        raise ValueError("support T must be non-empty")
    if C <= 0:
        raise ValueError("C must be positive")
    Tc = [j for j in range(p) if j not in set(T)]
    s = len(T)
    rng = _rng.substream(rng_seed, _rng.RE_SAMPLES)

    best = np.inf
    n_patterns = 2 ** (s - 1)
    if n_patterns <= n_samples:
        patterns = [np.array((1,) + bits) for bits in itertools.product((1, -1), repeat=s - 1)]
        exact = True
    else:
        seen = set()
        patterns = []
        for _ in range(n_samples):
            d_T = rng.standard_normal(s)
            d_Tc = rng.laplace(size=len(Tc))
            # sampled point in the cone; its value is a valid upper bound too
            if len(Tc):
                d_Tc *= rng.uniform() * C * np.sum(np.abs(d_T)) / max(np.sum(np.abs(d_Tc)), 1e-300)
            d = np.zeros(p)
            d[T] = d_T
            d[Tc] = d_Tc
            best = min(best, s * float(d @ M @ d) / np.sum(np.abs(d_T)) ** 2)
            sg = np.sign(d_T)
            sg[sg == 0] = 1
            if sg[0] < 0:
                sg = -sg
            key = tuple(sg.astype(int))
            if key not in seen:
                seen.add(key)
                patterns.append(sg)
        exact = False
    for sg in patterns:
        best = min(best, s * _orthant_qp(M, T, Tc, sg.astype(float), C))
    kappa2 = max(best, 0.0)
    return GramDiagnostics(
        m=s,
        phi_min=float("nan"),
        phi_max=float("nan"),
        exact=False,
        kappa_hat=math.sqrt(kappa2),
        kappa_C=float(C),
        samples=len(patterns),
        kappa_exact=exact,
    )
