import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import toeplitz

from sparseiv.montecarlo import (
    Design,
    McDesign,
    estimator_label,
    gen_replication,
    mc_metrics,
    standard_grid,
    pi_vector,
    run_cell,
    run_replication,
    sigma_v2_from_fstar,
)


def test_pi_vectors():
    cut = pi_vector(Design.CUTOFF, 100)
    assert cut[:5].tolist() == [1.0] * 5 and not cut[5:].any() and len(cut) == 100
    np.testing.assert_allclose(pi_vector(Design.EXPONENTIAL, 3), [1.0, 0.7, 0.49], rtol=1e-15)
    assert np.all(np.diff(pi_vector(Design.EXPONENTIAL, 20)) < 0)
    with pytest.raises(ValueError):
        pi_vector(Design.CUTOFF, 4)


def test_sigma_v2_closed_forms():
    e1 = np.zeros(100)
    e1[0] = 1.0
    assert sigma_v2_from_fstar(e1, toeplitz(0.5 ** np.arange(100)), 500, 40) == pytest.approx(12.5, abs=1e-10)
    Sz = toeplitz(0.5 ** np.arange(100))
    pi = pi_vector(Design.CUTOFF, 100)
    assert pi @ Sz @ pi == pytest.approx(11.125, abs=1e-12)
    assert sigma_v2_from_fstar(pi, Sz, 101, 10) == pytest.approx(22.4725, abs=1e-10)
    big = [sigma_v2_from_fstar(pi, Sz, 101, f) for f in (1e2, 1e4, 1e8)]
    assert big[0] > big[1] > big[2] and big[2] < 1e-4


def test_design_validation():
    with pytest.raises(ValueError):
        McDesign(corr_ev=1.0)
    with pytest.raises(ValueError):
        McDesign(f_star=0.0)
    with pytest.raises(ValueError):
        McDesign(n_reps=0)


def test_generator_is_deterministic():
    d = McDesign(n=50, n_reps=3, rng_seed=9)
    a, ta = gen_replication(d, 2)
    b, tb = gen_replication(d, 2)
    np.testing.assert_array_equal(a.F_raw, b.F_raw)
    np.testing.assert_array_equal(a.y1, b.y1)
    c, _ = gen_replication(d, 1)
    assert not np.array_equal(a.y1, c.y1)


def test_noiseless_first_stage_limit():
    d = McDesign(n=200, f_star=1e14, n_reps=1)
    data, truth = gen_replication(d, 0)
    np.testing.assert_allclose(data.y2, data.F_raw @ d.pi, atol=1e-5)
    np.testing.assert_allclose(truth.D, data.F_raw @ d.pi, rtol=1e-14)
    np.testing.assert_allclose(truth.approximation_error(data.normalized().F), 0.0, atol=1e-12)


def test_sampled_correlations():
    d = McDesign(n=100_000, p=5, f_star=1000.0, corr_ev=0.6, n_reps=1, rng_seed=4)
    data, truth = gen_replication(d, 0)
    z = data.F_raw
    assert abs(np.corrcoef(z[:, 0], z[:, 1])[0, 1] - 0.5) < 0.01
    v = data.y2 - truth.D
    e = data.y1 - d.alpha_true * data.y2
    assert abs(np.corrcoef(e, v)[0, 1] - 0.6) < 0.01


def test_exponential_truth_is_approximately_sparse():
    d = McDesign(n=500, design=Design.EXPONENTIAL, f_star=40, n_reps=1)
    data, truth = gen_replication(d, 0)
    assert 1 <= truth.s < d.p
    assert truth.c_s <= math.sqrt(d.sigma_v2 / d.n)
    resid = truth.approximation_error(data.normalized().F)
    assert np.sqrt(np.mean(resid**2)) == pytest.approx(truth.c_s, rel=1e-10)


@pytest.mark.parametrize(
    "est, rmse, bias, mad",
    [((1, 1, 1), 0.0, 0.0, 0.0), ((0, 2), 1.0, 0.0, 1.0), ((0.5, 1.0, 1.5), math.sqrt(0.5 / 3), 0.0, 0.5)],
)
def test_metric_examples(est, rmse, bias, mad):
    m = mc_metrics(est, [1.0] * len(est), 1.0)
    assert m.rmse == pytest.approx(rmse, abs=1e-15)
    assert m.med_bias == pytest.approx(bias, abs=1e-15)
    assert m.mad == pytest.approx(mad, abs=1e-15)


def test_metric_example_value():
    assert math.sqrt(0.5 / 3) == pytest.approx(0.40825, abs=1e-5)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30),
    st.floats(0.01, 5.0),
)
def test_metric_sanity(est, se):
    m = mc_metrics(est, [se] * len(est), 1.0)
    assert m.rmse + 1e-12 >= abs(np.mean(np.asarray(est) - 1.0))
    assert m.mad >= 0 and m.mean_abs_dev >= 0
    assert 0.0 <= m.rp05 <= 1.0


def test_noiseless_oracle_rmse_zero():
    d = McDesign(n=200, sigma_e2=0.0, n_reps=1, rng_seed=1)
    res = run_cell(d, ["oracle"])
    assert res.metrics["oracle"].rmse == 0.0


def test_cell_counts_and_determinism():
    d = McDesign(n=120, f_star=20, n_reps=6, rng_seed=2, n_sim=1000, k_folds=3)
    keys = ["oracle", "2sls-all", "full-all", "iv-lasso", "full-lasso", "iv-sqlasso", "split-lasso"]
    one = run_cell(d, keys, jobs=1)
    two = run_cell(d, keys, jobs=2)
    assert one.to_csv() == two.to_csv()
    assert one.audit_csv() == two.audit_csv()
    assert one.to_dict() == run_cell(d, keys, jobs=1).to_dict()
    for key in keys:
        m = one.metrics[key]
        assert m.n_used + m.n_zero_selected + m.n_failed == d.n_reps


def test_shared_selection_between_iv_and_fuller_rows():
    d = McDesign(n=200, f_star=40, n_reps=1, rng_seed=5, n_sim=1000)
    rec = run_replication(d, 0, ["iv-lasso", "full-lasso"])
    assert rec["iv-lasso"][3] == rec["full-lasso"][3]


def test_oracle_rmse_monotone_in_noise():
    violations = 0
    for seed in range(5):
        rmses = [
            run_cell(McDesign(n=500, sigma_e2=s**2, n_reps=500, rng_seed=seed), ["oracle"]).metrics["oracle"].rmse
            for s in (0.5, 1.0, 2.0)
        ]
        violations += sum(b < a for a, b in zip(rmses, rmses[1:]))
    assert violations <= 2


def test_labels_and_grid():
    assert estimator_label("2sls-all", 100) == "2SLS(100)"
    assert estimator_label("full-all", 100) == "FULL(100)"
    assert estimator_label("iv-sqlasso-cv", 100) == "IV-SQLASSO-CV"
    cells = standard_grid(n_reps=3, rng_seed=1)
    assert len(cells) == 24 and len({c.label() for c in cells}) == 24


def test_unknown_estimator_rejected():
    with pytest.raises(ValueError):
        run_cell(McDesign(n=50, n_reps=1), ["bogus"])
