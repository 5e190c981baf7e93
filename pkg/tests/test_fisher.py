import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from conftest import BENCH_C_BAYES_I, BENCH_C_ML, BENCH_C_MULTI, BENCH_I_X, BENCH_I_XY
from latentkl.fisher import (
    FisherBundle,
    coeff_bayes_multitarget,
    coeff_bayes_type1,
    coeff_ml,
    coeff_predictions,
    coefficient_report,
    fisher_matrices,
    score_gradients,
)
from latentkl.model import MixtureModel, NonRegularError, TrueDistribution, apply_permutation


def bundle(i_x, i_yx):
    i_x = np.atleast_2d(np.asarray(i_x, dtype=float))
    i_yx = np.atleast_2d(np.asarray(i_yx, dtype=float))
    return FisherBundle(i_x, i_x + i_yx, i_yx, "synthetic", 0.0)


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T) + 0.1 * np.eye(d)


def check_bundle_invariants(b):
    for mat in (b.i_x, b.i_xy, b.i_y_given_x):
        assert np.max(np.abs(mat - mat.T)) <= 1e-9
    np.testing.assert_array_equal(b.i_xy, b.i_x + b.i_y_given_x)
    assert np.linalg.eigvalsh(b.i_x)[0] > 0
    assert np.linalg.eigvalsh(b.i_xy)[0] > 0
    assert np.linalg.eigvalsh(b.i_y_given_x)[0] >= -1e-8


# -- matrices -----------------------------------------------------------------


def test_single_component_unit_gaussian():
    td = TrueDistribution(MixtureModel(1, 1, np.eye(1)), np.array([0.25]))
    b = fisher_matrices(td)
    np.testing.assert_allclose(b.i_x, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(b.i_xy, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(b.i_y_given_x, [[0.0]], atol=1e-12)


def test_symmetric_instance_has_latent_information():
    td = TrueDistribution(MixtureModel(2, 1, np.eye(1)), np.array([0.5, -2.0, 2.0]))
    b = fisher_matrices(td)
    check_bundle_invariants(b)
    eig = np.linalg.eigvalsh(b.i_y_given_x)
    assert eig[0] >= -1e-8 and eig[-1] > 0.1
    # regression fixtures from the resolution-200 quadrature oracle
    np.testing.assert_allclose(np.diag(b.i_x), [3.7256103656330106, 0.4259887207542422, 0.4259887207542422],
                               rtol=1e-9)
    np.testing.assert_allclose(np.diag(b.i_xy), [4.0, 0.5, 0.5], rtol=1e-9)
    np.testing.assert_allclose(eig[1:], [1.0827741286157310e-02, 4.1158445155048279e-01], rtol=1e-7)


def _fd_marginal_score(model, w, x, h=1e-6):
    out = np.empty(model.d)
    for i in range(model.d):
        e = np.zeros(model.d)
        e[i] = h
        out[i] = (model.log_marginal(w + e, x)[0] - model.log_marginal(w - e, x)[0]) / (2 * h)
    return out


def test_benchmark_matches_adaptive_integration(bench_true, bench_fisher):
    """Independent oracle: adaptive quadrature over x of finite-difference scores."""
    model, w = bench_true.model, bench_true.w_star

    def integrand(t, i, j):
        x = np.array([[t]])
        s = _fd_marginal_score(model, w, x)
        return s[i] * s[j] * math.exp(model.log_marginal(w, x)[0])

    oracle = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            oracle[i, j] = oracle[j, i] = quad(integrand, -14, 14, args=(i, j), points=[-1.5, 1.5],
                                               limit=200, epsabs=1e-11)[0]
    np.testing.assert_allclose(bench_fisher.i_x, oracle, atol=1e-7)
    np.testing.assert_allclose(bench_fisher.i_x, BENCH_I_X, atol=1e-12)
    # complete data: diag(1 / (a (1 - a)), a / sigma^2, (1 - a) / sigma^2)
    np.testing.assert_allclose(bench_fisher.i_xy, BENCH_I_XY, atol=1e-10)
    assert bench_fisher.error_bound < 1e-6
    check_bundle_invariants(bench_fisher)


def test_monte_carlo_backend_agrees_with_quadrature(bench_true, bench_fisher):
    mc = fisher_matrices(bench_true, "monte-carlo", seed=11)
    assert mc.method == "monte-carlo" and mc.error_bound > 0
    check_bundle_invariants(mc)
    for name in ("i_x", "i_xy"):
        se = mc.stderr[name]
        diff = np.abs(getattr(mc, name) - getattr(bench_fisher, name))
        random_part = se > 0
        assert np.all(diff[random_part] <= 4 * se[random_part])
        # entries whose integrand vanishes identically have no Monte Carlo error
        assert np.all(diff[~random_part] <= 1e-12)


def test_monte_carlo_needs_enough_draws(bench_true):
    with pytest.raises(ValueError):
        fisher_matrices(bench_true, "monte-carlo", draws=1000)


def test_quadrature_rejects_high_dimension():
    td = TrueDistribution(MixtureModel(2, 3, np.eye(3)), np.array([0.5, 0, 0, 0, 2, 2, 2]))
    with pytest.raises(ValueError, match="M <= 2"):
        fisher_matrices(td, "quadrature")


def test_two_dimensional_quadrature_vs_monte_carlo():
    sigma = np.array([[1.0, 0.2], [0.2, 0.8]])
    td = TrueDistribution(MixtureModel(2, 2, sigma), np.array([0.45, -1.0, 0.0, 1.5, 0.5]))
    q = fisher_matrices(td, resolution=40)
    mc = fisher_matrices(td, "monte-carlo", seed=3)
    check_bundle_invariants(q)
    se = mc.stderr["i_x"]
    assert np.all(np.abs(mc.i_x - q.i_x)[se > 0] <= 4 * se[se > 0])


def test_nearly_coincident_means_are_not_regular():
    td = TrueDistribution(MixtureModel(2, 1, np.eye(1)), np.array([0.5, -1e-4, 1e-4]))
    with pytest.raises(NonRegularError, match="not regular"):
        fisher_matrices(td)


def test_unknown_backend():
    td = TrueDistribution(MixtureModel(1, 1, np.eye(1)), np.array([0.0]))
    with pytest.raises(ValueError):
        fisher_matrices(td, "simpson")


def test_coefficients_equal_at_symmetric_point(bench_true, bench_report):
    model = bench_true.model
    swapped = TrueDistribution(model, apply_permutation(model, (1, 0), bench_true.w_star))
    rep = coefficient_report(fisher_matrices(swapped), (0.25, 0.5, 1.0))
    assert rep.c_ml == pytest.approx(bench_report.c_ml, rel=1e-9)
    assert rep.c_bayes_I == pytest.approx(bench_report.c_bayes_I, rel=1e-9)


# -- scores -------------------------------------------------------------------


def test_score_finite_differences():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        K, M = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        A = rng.normal(size=(M, M))
        model = MixtureModel(K, M, A @ A.T + np.eye(M))
        w = model.pack(rng.dirichlet(np.full(K, 3.0)), rng.normal(size=(K, M)))
        x = rng.normal(scale=2.0, size=(1, M))
        y = rng.integers(K, size=1)
        joint, marginal = score_gradients(model, w, x, y)
        h = 1e-5
        for i in range(model.d):
            e = np.zeros(model.d)
            e[i] = h
            fd_joint = (model.log_joint(w + e, x, y) - model.log_joint(w - e, x, y))[0] / (2 * h)
            fd_marg = (model.log_marginal(w + e, x) - model.log_marginal(w - e, x))[0] / (2 * h)
            worst = max(worst, abs(fd_joint - joint[0, i]), abs(fd_marg - marginal[0, i]))
    assert worst < 1e-6


def test_marginal_score_is_posterior_average():
    rng = np.random.default_rng(6)
    model = MixtureModel(3, 2, np.eye(2))
    w = model.pack(np.array([0.2, 0.3, 0.5]), rng.normal(size=(3, 2)))
    x = rng.normal(size=(50, 2))
    joint, marginal = score_gradients(model, w, x)
    resp = model.posterior_label(w, x)
    np.testing.assert_allclose(np.einsum("nk,nkd->nd", resp, joint), marginal, atol=1e-10)


def test_single_component_score():
    model = MixtureModel(1, 1, np.eye(1))
    _, marginal = score_gradients(model, np.array([0.4]), np.array([[1.5]]))
    assert marginal[0, 0] == pytest.approx(1.1, abs=1e-15)


def test_score_rejects_boundary():
    with pytest.raises(NonRegularError):
        score_gradients(MixtureModel(2, 1, np.eye(1)), np.array([0.0, 0.0, 1.0]), np.array([[0.0]]))


# -- coefficients ---------------------------------------------------------------


def test_coeff_ml_examples(bench_fisher):
    assert coeff_ml(bundle(np.eye(3), np.zeros((3, 3)))) == 0.0
    for d in (1, 2, 5):
        assert coeff_ml(bundle(2 * np.eye(d), np.eye(d))) == pytest.approx(d / 4, abs=1e-14)
    assert coeff_ml(bench_fisher) == pytest.approx(BENCH_C_ML, abs=1e-9)
    assert coeff_ml(bench_fisher) > 0


def test_coeff_bayes_type1_examples(bench_fisher):
    assert coeff_bayes_type1(bundle(np.eye(4), np.zeros((4, 4)))) == pytest.approx(0.0, abs=1e-15)
    assert coeff_bayes_type1(bundle([[2.0]], [[1.0]])) == pytest.approx(0.5 * math.log(1.5), abs=1e-15)
    assert coeff_bayes_type1(bench_fisher) == pytest.approx(BENCH_C_BAYES_I, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 6))
def test_bayes_type1_never_exceeds_ml(seed, d):
    rng = np.random.default_rng(seed)
    i_x = random_spd(rng, d)
    B = rng.normal(size=(d, d))
    b = bundle(i_x, B @ B.T)
    assert coeff_bayes_type1(b) <= coeff_ml(b) + 1e-12
    if np.linalg.eigvalsh(b.i_y_given_x)[0] > 1e-6:
        assert coeff_bayes_type1(b) < coeff_ml(b)


def test_coeff_multitarget_examples(bench_fisher):
    assert coeff_bayes_multitarget(bench_fisher, 1.0) == pytest.approx(coeff_bayes_type1(bench_fisher), abs=1e-14)
    for a in (0.1, 0.5, 1.0):
        assert coeff_bayes_multitarget(bundle(np.eye(2), np.zeros((2, 2))), a) == pytest.approx(0.0, abs=1e-14)
    small = coeff_bayes_multitarget(bench_fisher, 1e-4)
    assert small == pytest.approx(coeff_ml(bench_fisher), rel=1e-3)
    for a, v in BENCH_C_MULTI.items():
        assert coeff_bayes_multitarget(bench_fisher, a) == pytest.approx(v, abs=1e-9)


def test_multitarget_series_oracle(bench_fisher):
    # (1/2a) ln det(1 + a A) = Tr A / 2 - a Tr A^2 / 4 + a^2 Tr A^3 / 6 - ...
    A = np.linalg.solve(bench_fisher.i_x, bench_fisher.i_y_given_x)
    a = 1e-4
    series = np.trace(A) / 2 - a * np.trace(A @ A) / 4 + a**2 * np.trace(A @ A @ A) / 6
    assert coeff_bayes_multitarget(bench_fisher, a) == pytest.approx(series, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_multitarget_strictly_decreasing_in_alpha(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    B = rng.normal(size=(d, d))
    b = bundle(random_spd(rng, d), B @ B.T + 0.01 * np.eye(d))
    values = [coeff_bayes_multitarget(b, a) for a in np.linspace(0.05, 1.0, 20)]
    assert all(x > y for x, y in zip(values, values[1:]))


@pytest.mark.parametrize("alpha", [0.0, -0.5, 1.5])
def test_multitarget_alpha_range(bench_fisher, alpha):
    with pytest.raises(ValueError):
        coeff_bayes_multitarget(bench_fisher, alpha)


def test_singular_fisher_rejected():
    with pytest.raises(NonRegularError):
        coeff_ml(bundle(np.diag([1.0, 0.0]), np.zeros((2, 2))))
    with pytest.raises(NonRegularError):
        coeff_bayes_type1(bundle(np.diag([1.0, 1e-12]), np.zeros((2, 2))))


def test_coeff_predictions():
    c_stp, c_mtp = coeff_predictions(3, 1.0)
    assert c_stp == 1.5
    assert c_mtp == pytest.approx(1.5 * math.log(2), abs=1e-15)
    _, near = coeff_predictions(3, 1e-6)
    assert near == pytest.approx(1.5, abs=1e-5)
    for a in (1e-3, 0.25, 0.5, 1.0, 3.0):
        s, m = coeff_predictions(4, a)
        assert m < s
    with pytest.raises(ValueError):
        coeff_predictions(0, 1.0)
    with pytest.raises(ValueError):
        coeff_predictions(3, 0.0)


def test_report_fields(bench_report):
    d = bench_report.as_dict()
    assert set(d) == {"c_ml", "c_bayes_I", "c_bayes_IIp", "c_bayes_IIIp", "c_stp", "c_mtp", "d"}
    assert d["d"] == 3 and d["c_stp"] == 1.5
    assert set(d["c_bayes_IIp"]) == {"0.25", "0.5", "1"}
    assert d["c_bayes_IIp"] == d["c_bayes_IIIp"]
    assert d["c_bayes_I"] < d["c_ml"]
