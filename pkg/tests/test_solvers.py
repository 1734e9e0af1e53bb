import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls

from sketchnmf.exceptions import InvalidConfigError, ShapeError
from sketchnmf.matcore import OpCounter
from sketchnmf.sketch import gen_gaussian_sketch
from sketchnmf.solvers import (
    EtaSchedule,
    MuSchedule,
    ZeroColumnWarning,
    clamp_bound,
    clamp_domain,
    exact_gradient,
    hals_update,
    mu_update,
    pcd_step,
    pgd_step,
    projected_gradient_norm,
    sketched_gradient,
)


def objective(M, U, V):
    return float(np.sum((M - U @ V.T) ** 2))


def naive_prox_sweep(U, U0, A, B, mu):
    """Scalar-loop oracle for one proximal coordinate sweep."""
    U = U.copy()
    G, AB = B @ B.T, A @ B.T
    rows, k = U.shape
    for j in range(k):
        for i in range(rows):
            s = sum(U[i, l] * G[l, j] for l in range(k) if l != j)
            U[i, j] = max((mu * U0[i, j] + AB[i, j] - s) / (G[j, j] + mu), 0.0)
    return U


@st.composite
def problems(draw):
    seed = draw(st.integers(0, 2**31))
    r = np.random.default_rng(seed)
    m, n, k = (int(x) for x in r.integers(2, 12, size=3))
    return r.uniform(size=(m, n)), r.uniform(size=(m, k)) + 0.01, r.uniform(size=(n, k)) + 0.01


@given(problems())
def test_mu_update_never_increases_objective(p):
    M, U, V = p
    U1 = mu_update(M, U, V)
    assert np.all(U1 >= 0)
    assert objective(M, U1, V) <= objective(M, U, V) * (1 + 1e-12) + 1e-12


@given(problems())
def test_hals_update_never_increases_objective(p):
    M, U, V = p
    U1 = hals_update(M, U, V)
    assert np.all(U1 >= 0)
    assert objective(M, U1, V) <= objective(M, U, V) * (1 + 1e-12) + 1e-12


@given(problems())
def test_hals_matches_scalar_oracle(p):
    M, U, V = p
    np.testing.assert_allclose(hals_update(M, U, V), naive_prox_sweep(U, U, M, V.T, 0.0),
                               rtol=1e-10, atol=1e-12)


def test_hals_converges_to_nnls_solution(rng):
    M = rng.uniform(size=(6, 9))
    V = rng.uniform(size=(9, 3))
    U = rng.uniform(size=(6, 3))
    for _ in range(3000):
        U = hals_update(M, U, V)
    ref = np.vstack([nnls(V, row)[0] for row in M])
    np.testing.assert_allclose(U, ref, atol=1e-7)


@given(problems(), st.floats(0.0, 50.0))
def test_pcd_matches_scalar_oracle(p, mu):
    M, U, V = p
    U0 = U * 0.5
    np.testing.assert_allclose(pcd_step(U, U0, M, V.T, mu), naive_prox_sweep(U, U0, M, V.T, mu),
                               rtol=1e-10, atol=1e-12)


def test_pcd_with_zero_mu_is_hals(rng):
    M, U, V = rng.uniform(size=(8, 7)), rng.uniform(size=(8, 3)), rng.uniform(size=(7, 3))
    np.testing.assert_allclose(pcd_step(U, U, M, V.T, 0.0), hals_update(M, U, V), rtol=1e-12)


def test_pcd_large_mu_stays_at_centre(rng):
    M, U, V = rng.uniform(size=(8, 7)), rng.uniform(size=(8, 3)), rng.uniform(size=(7, 3))
    np.testing.assert_allclose(pcd_step(U, U, M, V.T, 1e12), U, rtol=1e-9)


def test_pcd_decreases_proximal_objective(rng):
    M, U, V = rng.uniform(size=(8, 7)), rng.uniform(size=(8, 3)), rng.uniform(size=(7, 3))
    S = gen_gaussian_sketch(0, 0, 7, 4)
    A, B = M @ S.to_dense(), V.T @ S.to_dense()
    mu = 2.0
    U1 = pcd_step(U, U, A, B, mu)

    def f(X):
        return np.sum((A - X @ B) ** 2) + mu * np.sum((X - U) ** 2)

    assert f(U1) <= f(U) + 1e-12


def test_pgd_step_formula(rng):
    U, A, B = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 4)), rng.uniform(size=(3, 4))
    eta = 0.05
    expected = np.maximum(U - 2 * eta * (U @ B @ B.T - A @ B.T), 0)
    np.testing.assert_allclose(pgd_step(U, A, B, eta), expected, rtol=1e-12, atol=1e-14)
    with pytest.raises(InvalidConfigError):
        pgd_step(U, A, B, 0.0)


def test_pgd_small_step_descends(rng):
    M, U, V = rng.uniform(size=(8, 7)), rng.uniform(size=(8, 3)), rng.uniform(size=(7, 3))
    U1 = pgd_step(U, M, V.T, 1e-3)
    assert objective(M, U1, V) < objective(M, U, V)


def test_zero_column_is_skipped_with_warning(rng):
    M, U = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 2))
    V = rng.uniform(size=(4, 2))
    V[:, 1] = 0.0
    with pytest.warns(ZeroColumnWarning):
        U1 = hals_update(M, U, V)
    np.testing.assert_array_equal(U1[:, 1], U[:, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pcd_step(U, U, M, V.T, 1.0)  # mu > 0 keeps the curvature positive


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        hals_update(np.ones((3, 4)), np.ones((3, 2)), np.ones((5, 2)))
    with pytest.raises(ShapeError):
        mu_update(np.ones((3, 4)), np.ones((2, 2)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        pcd_step(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 4)), np.ones((2, 5)), 1.0)
    with pytest.raises(ShapeError):
        pcd_step(np.ones((3, 2)), np.ones((2, 2)), np.ones((3, 4)), np.ones((2, 4)), 1.0)


def test_inputs_untouched(rng):
    M, U, V = rng.uniform(size=(6, 5)), rng.uniform(size=(6, 2)), rng.uniform(size=(5, 2))
    before = U.copy()
    hals_update(M, U, V)
    mu_update(M, U, V)
    pcd_step(U, U, M, V.T, 1.0)
    np.testing.assert_array_equal(U, before)


def test_schedules():
    eta = EtaSchedule()
    assert eta(0) == 0.01 and eta(100) == pytest.approx(0.005)
    mu = MuSchedule()
    assert mu(0) == 1.0 and mu(9) == 10.0
    with pytest.raises(InvalidConfigError):
        EtaSchedule(eta0=0)
    with pytest.raises(InvalidConfigError):
        MuSchedule(alpha=-1)


def test_clamp():
    M = np.full((2, 2), 2.0)
    b = clamp_bound(M)
    assert b == pytest.approx(np.sqrt(2 * 4.0))
    np.testing.assert_array_equal(clamp_domain(np.array([[1.0, 10.0]]), b), [[1.0, b]])
    with pytest.raises(InvalidConfigError):
        clamp_domain(np.ones((1, 1)), 0.0)


def test_gradients(rng):
    M, U, V = rng.uniform(size=(6, 5)), rng.uniform(size=(6, 2)), rng.uniform(size=(5, 2))
    g = exact_gradient(M, U, V)
    eps, E = 1e-6, np.zeros_like(U)
    E[2, 1] = eps
    fd = (objective(M, U + E, V) - objective(M, U - E, V)) / (2 * eps)
    assert g[2, 1] == pytest.approx(fd, rel=1e-6)
    S = gen_gaussian_sketch(0, 0, 5, 5)
    assert sketched_gradient(M, U, V, S).shape == U.shape


def test_projected_gradient_norm_zero_at_exact_fit(rng):
    U, V = rng.uniform(size=(6, 2)), rng.uniform(size=(5, 2))
    assert projected_gradient_norm(U @ V.T, U, V) == pytest.approx(0.0, abs=1e-12)
    assert projected_gradient_norm(U @ V.T + 1.0, U, V) > 0


def test_operation_counts(rng):
    M, U, V = rng.uniform(size=(8, 6)), rng.uniform(size=(8, 3)), rng.uniform(size=(6, 3))
    c = OpCounter()
    hals_update(M, U, V, c)
    assert c.mults == 8 * 6 * 3 + 6 * 3 * 3 + (3 * 3 * 8 + 3 * 8)
