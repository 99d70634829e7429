import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rsdmd.dictionary import HermiteDictionary, MonomialDictionary, RbfDictionary, TrainableDictionary
from rsdmd.exceptions import InvalidInput, ShapeMismatch, SingularGram, UnsupportedDictionary
from rsdmd.sdmd import (GRAM_CHUNK, SDMD, KoopmanEstimate, build_gram, default_ridge, dictionary_objective,
                        edmd_operator, eigenfunction_values, estimate_koopman, normalize_columns,
                        spectral_consistency, train_dictionary)
from rsdmd.systems import SnapshotData, builtin_system, simulate_trajectory

OU = builtin_system("ou")


def test_build_gram_small_example():
    psi = np.array([[1.0, 0.0], [1.0, 2.0]])
    prime = np.array([[0.0, 1.0], [0.0, -1.0]])
    g, h = build_gram(psi, prime)
    assert np.array_equal(g, [[1.0, 1.0], [1.0, 2.0]])
    assert np.array_equal(h, [[0.0, 0.0], [0.0, -1.0]])


@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_build_gram_matches_loops(m, n, seed):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=(m, n))
    prime = rng.normal(size=(m, n))
    g, h = build_gram(psi, prime)
    g_ref = np.zeros((n, n))
    h_ref = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for r in range(m):
                g_ref[i, j] += psi[r, i] * psi[r, j] / m
                h_ref[i, j] += psi[r, i] * prime[r, j] / m
    assert np.allclose(g, g_ref, rtol=0, atol=1e-12) and np.allclose(h, h_ref, rtol=0, atol=1e-12)
    assert np.array_equal(g, g.T)
    assert np.all(np.linalg.eigvalsh(g) > -1e-12)


def test_build_gram_shape_errors():
    with pytest.raises(ShapeMismatch):
        build_gram(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        build_gram(np.zeros((0, 2)), np.zeros((0, 2)))


def test_identity_gram_zero_generator():
    est = estimate_koopman(np.eye(3), np.zeros((3, 3)), 0.1, ridge=0.0)
    assert np.array_equal(est.k, np.eye(3))
    assert np.allclose(est.eigenvalues_mu, 1.0)
    assert np.allclose(est.eigenvalues_lambda, 0.0)


def test_diagonal_generator_eigenvalues():
    h = np.diag([0.0, -1.0, -2.0])
    est = estimate_koopman(np.eye(3), h, 0.01, ridge=0.0)
    assert np.allclose(est.eigenvalues_mu, [1.0, 0.99, 0.98])
    assert np.allclose(est.eigenvalues_lambda.real, np.log([1.0, 0.99, 0.98]) / 0.01)
    assert np.all(est.residuals() < 1e-12)


def test_default_ridge_value():
    assert default_ridge(np.diag([2.0, 4.0])) == pytest.approx(3e-8)


def test_singular_gram():
    g = np.diag([1.0, 0.0])
    h = np.diag([-1.0, 0.0])
    with pytest.raises(SingularGram):
        estimate_koopman(g, h, 0.1, ridge=0.0, on_singular="raise")
    est = estimate_koopman(g, h, 0.1, ridge=0.0)
    assert np.all(np.isfinite(est.k))
    assert est.unresolved.tolist() == [False, True]
    assert est.eigenvalues_mu[0] == pytest.approx(0.9)
    with pytest.raises(SingularGram):
        estimate_koopman(np.zeros((2, 2)), np.zeros((2, 2)), 0.1, ridge=0.0)


def test_estimate_validation():
    with pytest.raises(ShapeMismatch):
        estimate_koopman(np.eye(2), np.eye(3), 0.1)
    with pytest.raises(InvalidInput):
        estimate_koopman(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(InvalidInput):
        estimate_koopman(np.eye(2), np.eye(2), 0.1, ridge=-1.0)


def test_branch_and_degenerate_flags():
    # mu = 1 + dt * h: h = -20 gives mu = -1, h = -10 gives mu = 0
    est = estimate_koopman(np.eye(3), np.diag([0.0, -20.0, -10.0]), 0.1, ridge=0.0)
    assert est.degenerate.sum() == 1 and est.branch_ambiguous.sum() == 1
    assert np.isnan(est.eigenvalues_lambda[est.degenerate | est.branch_ambiguous]).all()
    assert est.retained.tolist() == [0]


def test_ou_spectrum():
    data = simulate_trajectory(OU, [0.0], 100_000, 0.01, seed=2)
    model = SDMD(HermiteDictionary(degree=2), system=OU, dt=0.01).fit(data.x)
    lam = np.sort(model.generator_eigenvalues_.real)[::-1]
    assert abs(lam[0]) < 0.05
    assert lam[1] == pytest.approx(-1.0, rel=0.1)
    assert lam[2] == pytest.approx(-2.0, rel=0.1)


@pytest.mark.parametrize("seed", range(5))
def test_finite_diff_matches_edmd(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(10, 101), rng.integers(2, 9)
    psi_x = np.hstack([np.ones((m, 1)), rng.normal(size=(m, n - 1))])
    psi_y = np.hstack([np.ones((m, 1)), rng.normal(size=(m, n - 1))])
    dt = 0.01
    g, h = build_gram(psi_x, (psi_y - psi_x) / dt)
    est = estimate_koopman(g, h, dt, ridge=0.0)
    assert np.max(np.abs(est.k - edmd_operator(psi_x, psi_y))) < 1e-10


def test_mu_lambda_consistency(rng):
    a = rng.normal(size=(4, 4))
    est = estimate_koopman(a @ a.T + np.eye(4), -np.eye(4) + 0.1 * rng.normal(size=(4, 4)), 0.05)
    ok = est.retained
    assert np.allclose(np.exp(est.dt * est.eigenvalues_lambda[ok]), est.eigenvalues_mu[ok], atol=1e-12)
    assert np.all(est.residuals() < 1e-10)
    assert np.all(np.diff(np.abs(est.eigenvalues_mu)) <= 1e-12)


def test_normalization_idempotent(rng):
    phi = rng.normal(size=(10, 3)) + 1j * rng.normal(size=(10, 3))
    once = normalize_columns(phi)
    assert np.allclose(np.max(np.abs(once), axis=0), 1.0)
    assert np.allclose(once[np.argmax(np.abs(once), axis=0), range(3)], 1.0)
    assert np.allclose(normalize_columns(once), once, atol=1e-15)


def test_constant_mode_is_constant():
    data = simulate_trajectory(OU, [0.0], 5000, 0.01, seed=0)
    model = SDMD(MonomialDictionary(degree=3), system=OU, dt=0.01).fit(data.x)
    phi0 = model.transform(np.linspace(-2, 2, 9)[:, None])[:, 0]
    assert np.allclose(phi0, 1.0, atol=1e-8)


def _linear_estimate(mus):
    n = len(mus)
    h = np.diag((np.asarray(mus) - 1.0) / 0.1)
    return estimate_koopman(np.eye(n), h, 0.1, ridge=0.0)


def test_spectral_consistency_exact_and_perturbed(rng):
    est = _linear_estimate([1.0, 0.9, 0.8])
    psi_x = np.hstack([np.ones((50, 1)), rng.uniform(-1, 1, size=(50, 2))])
    psi_y = psi_x * est.eigenvalues_mu.real
    assert spectral_consistency(est, psi_x, psi_y).total == pytest.approx(0.0, abs=1e-24)
    # a uniform shift eta of the second mode gives eta^2 / max|phi|^2 per sample
    eta = 0.01
    shifted = psi_y.copy()
    shifted[:, 1] += eta
    scale = np.max(np.abs(np.concatenate([psi_x[:, 1], shifted[:, 1]])))
    report = spectral_consistency(est, psi_x, shifted)
    assert report.per_mode[1] == pytest.approx(eta**2 / scale**2, rel=1e-10)
    assert report.modes_used == 3
    assert spectral_consistency(est, psi_x, shifted, n_modes=1).modes_used == 1


@given(st.floats(-0.2, 0.2), st.integers(0, 1000))
def test_spectral_consistency_mu_perturbation(eta, seed):
    rng = np.random.default_rng(seed)
    a = 0.9
    est = _linear_estimate([1.0, a])
    x = rng.uniform(-1, 1, size=(30, 1))
    psi_x = np.hstack([np.ones((30, 1)), x])
    psi_y = np.hstack([np.ones((30, 1)), a * x])
    est.eigenvalues_mu = est.eigenvalues_mu + np.array([0.0, eta])
    # normalised eigenfunction of the linear mode is x / max|x| over the x and y rows
    phi_x = x[:, 0] / np.max(np.abs(x))
    per_mode = spectral_consistency(est, psi_x, psi_y).per_mode
    assert per_mode[1] == pytest.approx(eta**2 * np.mean(phi_x**2), rel=1e-9, abs=1e-15)


def test_spectral_consistency_grows_with_noise(rng):
    est = _linear_estimate([1.0, 0.9])
    psi_x = np.hstack([np.ones((200, 1)), rng.uniform(-1, 1, size=(200, 1))])
    base = psi_x * est.eigenvalues_mu.real
    noise = rng.normal(size=200)
    values = []
    for s in (0.0, 0.01, 0.1):
        y = base.copy()
        y[:, 1] += s * noise
        values.append(spectral_consistency(est, psi_x, y).total)
    assert values[0] < values[1] < values[2]


def test_spectral_consistency_weights():
    est = _linear_estimate([1.0, 0.5])
    psi_x = np.array([[1.0, 1.0], [1.0, -1.0]])
    with pytest.raises(InvalidInput):
        spectral_consistency(est, psi_x, psi_x, weights=[-1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        spectral_consistency(est, psi_x, psi_x[:1])


def test_dictionary_objective_gradients(rng):
    psi_x = rng.normal(size=(12, 4))
    psi_y = rng.normal(size=(12, 4))
    k = rng.normal(size=(4, 4))
    for gamma in (0.0, 0.3):
        _, d_x, d_y = dictionary_objective(psi_x, psi_y, k, gamma, ridge=1e-3)
        h = 1e-6
        for arr, grad in ((psi_x, d_x), (psi_y, d_y)):
            for idx in [(0, 0), (3, 2), (11, 3)]:
                orig = arr[idx]
                arr[idx] = orig + h
                up = dictionary_objective(psi_x, psi_y, k, gamma, ridge=1e-3)[0]
                arr[idx] = orig - h
                down = dictionary_objective(psi_x, psi_y, k, gamma, ridge=1e-3)[0]
                arr[idx] = orig
                assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def _linear_pairs(seed=0):
    x = np.random.default_rng(seed).uniform(-2, 2, size=(500, 1))
    return SnapshotData(x, 0.9 * x, 0.01)


def test_train_dictionary_zero_epochs():
    data = _linear_pairs()
    d = TrainableDictionary(hidden=(4,), n_outputs=2, seed=0)
    _, _, history = train_dictionary(data, d, epochs=0)
    assert len(history) == 1


@pytest.mark.parametrize("seed", range(3))
def test_train_dictionary_reduces_loss(seed):
    data = _linear_pairs(seed)
    d = TrainableDictionary(hidden=(1,), n_outputs=1, include_state=False, seed=seed)
    _, est, history = train_dictionary(data, d, epochs=50, batch=64, learning_rate=1e-3, seed=seed)
    assert history[0] / history[-1] >= 2.0
    assert isinstance(est, KoopmanEstimate)


def test_train_dictionary_regularizer_shrinks_operator():
    data = _linear_pairs(1)
    norms = []
    for gamma in (0.0, 1.0):
        d = TrainableDictionary(hidden=(4,), n_outputs=2, include_state=False, seed=1)
        _, est, _ = train_dictionary(data, d, gamma_reg=gamma, epochs=20, batch=64, learning_rate=1e-2, seed=1)
        norms.append(np.linalg.norm(est.k))
    assert norms[1] <= norms[0] + 1e-9


def test_train_dictionary_needs_trainable():
    with pytest.raises(UnsupportedDictionary):
        train_dictionary(_linear_pairs(), MonomialDictionary(degree=2))


def test_estimate_json_round_trip(rng):
    est = estimate_koopman(np.eye(3), np.diag([0.0, -20.0, -1.0]), 0.1, ridge=0.0)
    back = KoopmanEstimate.from_json(est.to_json())
    assert np.array_equal(back.k, est.k)
    assert np.array_equal(back.eigenvalues_mu, est.eigenvalues_mu)
    assert np.array_equal(back.branch_ambiguous, est.branch_ambiguous)
    ok = est.retained
    assert np.array_equal(back.eigenvalues_lambda[ok], est.eigenvalues_lambda[ok])


def test_chunked_gram_matches_single_pass():
    x = np.random.default_rng(3).normal(size=(GRAM_CHUNK + 500, 1))
    y = 0.99 * x
    d = MonomialDictionary(degree=2)
    chunked = SDMD(d, dt=0.01, generator="finite_diff").fit(x, y)
    psi_x = chunked.dictionary_.transform(x)
    g, h = build_gram(psi_x, (chunked.dictionary_.transform(y) - psi_x) / 0.01)
    assert np.allclose(chunked.g_, g, rtol=1e-10) and np.allclose(chunked.h_, h, rtol=1e-10, atol=1e-10)


def test_sdmd_estimator_api(rng):
    model = SDMD(RbfDictionary(n_centers_per_axis=3, domain=[(-2, 2)]), system=OU, dt=0.01, n_modes=2)
    with pytest.raises(NotFittedError):
        model.transform(np.zeros((1, 1)))
    assert clone(model).get_params()["n_modes"] == 2
    data = simulate_trajectory(OU, [0.0], 2000, 0.01, seed=4)
    model.fit_snapshots(data)
    assert model.transform(data.x[:5]).shape == (5, 2)
    assert model.predict(data.x[:5]).shape == (5, 4)
    assert model.score(data.x, data.y) <= 0.0
    with pytest.raises(InvalidInput):
        SDMD(MonomialDictionary(), dt=0.01).fit(data.x)
    with pytest.raises(InvalidInput):
        SDMD(MonomialDictionary(), dt=0.01, generator="finite_diff").fit(data.x)
    with pytest.raises(ShapeMismatch):
        model.fit(data.x, data.y[:-1])
    with pytest.raises(InvalidInput):
        model.fit_snapshots(SnapshotData(data.x, data.y, 0.02))


def test_eigenfunction_values_shape_check():
    est = _linear_estimate([1.0, 0.5])
    with pytest.raises(ShapeMismatch):
        eigenfunction_values(est, np.zeros((3, 3)))
