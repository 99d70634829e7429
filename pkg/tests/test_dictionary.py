import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rsdmd.dictionary import (DICTIONARY_KINDS, HermiteDictionary, MonomialDictionary, RbfDictionary,
                              TrainableDictionary, derivative_check, evaluate, finite_diff_generator,
                              generator_apply, make_dictionary)
from rsdmd.exceptions import InvalidInput, ShapeMismatch
from rsdmd.systems import builtin_system

OU = builtin_system("ou")
DW = builtin_system("double_well")


def fitted(kind, dim=2, **params):
    if kind == "rbf":
        params.setdefault("domain", [(-3, 3), (-4, 4)][:dim])
        params.setdefault("n_centers_per_axis", 4)
    return make_dictionary(kind, **params).fit(np.zeros((1, dim)))


def test_monomial_values():
    d = MonomialDictionary(degree=1).fit(np.zeros((1, 1)))
    assert np.array_equal(evaluate(d, np.array([[0.0], [1.0], [2.0]])), [[1, 0], [1, 1], [1, 2]])


def test_hermite_values():
    d = HermiteDictionary(degree=2).fit(np.zeros((1, 1)))
    assert np.allclose(d.transform(np.array([[2.0]])), [[1.0, 2.0, 3.0]])


def test_rbf_peak_at_center():
    d = RbfDictionary(centers=[[0.5, -0.5], [1.0, 2.0]], bandwidth=0.3).fit(np.zeros((1, 2)))
    vals = d.transform(np.array([[1.0, 2.0]]))
    assert vals[0, 0] == 1.0 and vals[0, 2] == 1.0


def test_rbf_default_layout():
    d = RbfDictionary(n_centers_per_axis=10, domain=[(-3, 3), (-4, 4)]).fit(np.zeros((1, 2)))
    assert d.size == 101
    assert d.centers_.shape == (100, 2)
    assert d.bandwidth_ == pytest.approx(0.7)
    assert d.centers_.min(axis=0) == pytest.approx([-2.7, -3.6])


def test_generator_linear_observable_ou():
    d = MonomialDictionary(degree=2).fit(np.zeros((1, 1)))
    gen = generator_apply(d, OU, np.array([[2.0], [1.0]]))
    assert gen[0, 1] == pytest.approx(-2.0)
    # psi = x^2: A psi = -2 x^2 + sigma^2 = -2 x^2 + 2
    assert gen[1, 2] == pytest.approx(0.0, abs=1e-12)
    assert gen[0, 2] == pytest.approx(-6.0)


def test_generator_matches_finite_difference_of_formula(rng):
    # cross-check of the analytic generator against b.grad + 1/2 tr(a Hess) with numerical derivatives
    d = fitted("rbf")
    x = rng.uniform([-2, -3], [2, 3], size=(3, 2))
    gen = d.generator(x, DW)
    h = 1e-4
    for i, p in enumerate(x):
        grad = np.zeros((d.size, 2))
        hess = np.zeros((d.size, 2, 2))
        f0 = d.transform(p[None])[0]
        for a in range(2):
            ea = np.eye(2)[a] * h
            grad[:, a] = (d.transform((p + ea)[None])[0] - d.transform((p - ea)[None])[0]) / (2 * h)
            hess[:, a, a] = (d.transform((p + ea)[None])[0] - 2 * f0 + d.transform((p - ea)[None])[0]) / h**2
        expected = grad @ DW.drift(p) + 0.5 * np.einsum("ij,nij->n", DW.diffusion_tensor(p), hess)
        expected[0] = 0.0
        assert np.allclose(gen[i], expected, atol=1e-5, rtol=1e-5)


@pytest.mark.parametrize("kind", DICTIONARY_KINDS)
def test_constant_column(kind, rng):
    d = fitted(kind)
    x = rng.uniform(-2, 2, size=(20, 2))
    assert np.all(d.transform(x)[:, 0] == 1.0)
    assert np.all(d.generator(x, DW)[:, 0] == 0.0)


@pytest.mark.parametrize("kind", DICTIONARY_KINDS)
def test_generator_linearity(kind, rng):
    d = fitted(kind)
    x = rng.uniform(-2, 2, size=(10, 2))
    c = rng.normal(size=d.size)
    gen = d.generator(x, DW)
    # generator of the combination, through combined derivatives
    _, grad, hess = d.derivatives(x)
    g_comb = np.einsum("mni,n->mi", grad, c)
    h_comb = np.einsum("mnij,n->mij", hess, c)
    direct = (np.einsum("mi,mi->m", DW.drift(x), g_comb)
              + 0.5 * np.einsum("mij,mij->m", DW.diffusion_tensor(x), h_comb))
    assert np.allclose(gen[:, 1:] @ c[1:], direct, rtol=1e-12, atol=1e-10)


def test_derivative_check_thresholds(rng):
    assert derivative_check(fitted("monomial", degree=3), rng.normal(size=2))["max_rel_error"] < 1e-6
    assert derivative_check(fitted("rbf"), rng.uniform(-2, 2, size=2))["max_rel_error"] < 1e-5
    trainable = TrainableDictionary(hidden=(16,), n_outputs=8, seed=3).fit(np.zeros((1, 2)))
    report = derivative_check(trainable, rng.normal(size=2))
    assert report["max_rel_error"] < 1e-4 and report["passed"]


@given(st.sampled_from(["rbf", "monomial", "hermite", "trainable"]), st.integers(0, 10_000))
def test_finite_difference_consistency(kind, seed):
    d = fitted(kind, degree=3) if kind in ("monomial", "hermite") else fitted(kind)
    point = np.random.default_rng(seed).uniform(-2, 2, size=2)
    assert derivative_check(d, point)["max_rel_error"] < 1e-4


def test_finite_diff_generator():
    z = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(finite_diff_generator(z, z, 0.1), np.zeros((3, 2)))
    assert np.allclose(finite_diff_generator([[1, 0]], [[1, 0.01]], 0.01), [[0, 1]])
    with pytest.raises(ShapeMismatch):
        finite_diff_generator(np.zeros((2, 2)), np.zeros((3, 2)), 0.1)
    with pytest.raises(InvalidInput):
        finite_diff_generator(z, z, 0.0)


def test_trainable_layout():
    d = TrainableDictionary(hidden=(4,), n_outputs=3, include_state=True).fit(np.zeros((1, 2)))
    x = np.array([[0.3, -0.7]])
    vals = d.transform(x)
    assert d.size == 1 + 2 + 3 and d.n_fixed == 3
    assert np.allclose(vals[0, :3], [1.0, 0.3, -0.7])
    assert np.allclose(vals[0, 3:], d.net_.forward(x)[0])


def test_sklearn_protocol():
    d = RbfDictionary(n_centers_per_axis=3)
    assert d.get_params()["n_centers_per_axis"] == 3
    with pytest.raises(NotFittedError):
        d.transform(np.zeros((1, 2)))
    c = clone(d.set_params(bandwidth=0.5))
    assert c.bandwidth == 0.5 and not hasattr(c, "centers_")
    # fitted on data without a domain: centres span the data bounding box
    data = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
    assert d.fit_transform(data).shape == (50, 10)


def test_invalid_inputs():
    d = fitted("monomial")
    with pytest.raises(InvalidInput):
        d.transform(np.array([[np.nan, 0.0]]))
    with pytest.raises(ShapeMismatch):
        d.transform(np.zeros((2, 3)))
    with pytest.raises(InvalidInput):
        make_dictionary("fourier")
