"""Observable dictionaries and their images under the stochastic generator.

Every dictionary starts with the constant observable ``psi_0 = 1``.  The
classes follow the scikit-learn transformer protocol: ``fit`` fixes
data-dependent parameters (input dimension, RBF centres, network weights),
``transform`` evaluates the observables row by row.
"""
from __future__ import annotations

import itertools

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInput, ShapeMismatch, UnsupportedDictionary
from .neural import Mlp

DICTIONARY_KINDS = ("rbf", "monomial", "hermite", "trainable")

# rows per block when materialising gradients and Hessians
_CHUNK = 2048


def _check_points(X, n_features=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if n_features in (None, 1) else X[None, :]
    if X.ndim != 2:
        raise InvalidInput(f"points must be a 2-D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("points contain non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeMismatch(f"expected {n_features} coordinates, got {X.shape[1]}")
    return X


class BaseDictionary(TransformerMixin, BaseEstimator):
    """Shared machinery: generator application from gradients and Hessians."""

    kind = None

    def fit(self, X, y=None):
        X = _check_points(X)
        self.n_features_in_ = X.shape[1]
        self._fit(X)
        return self

    def _fit(self, X):
        pass

    @property
    def size(self) -> int:
        check_is_fitted(self, "n_features_in_")
        return self._size()

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return self._values(_check_points(X, self.n_features_in_))

    def derivatives(self, X):
        """Values ``(m, N)``, gradients ``(m, N, d)`` and Hessians ``(m, N, d, d)``."""
        check_is_fitted(self, "n_features_in_")
        return self._derivatives(_check_points(X, self.n_features_in_))

    def generator(self, X, system):
        """``(A psi_j)(x_i)`` for the drift and diffusion of ``system``."""
        check_is_fitted(self, "n_features_in_")
        X = _check_points(X, self.n_features_in_)
        if system.dim != self.n_features_in_:
            raise ShapeMismatch(f"system dimension {system.dim} != dictionary input {self.n_features_in_}")
        out = np.empty((X.shape[0], self.size))
        for start in range(0, X.shape[0], _CHUNK):
            block = X[start:start + _CHUNK]
            out[start:start + _CHUNK] = self._generator_block(block, system)
        out[:, 0] = 0.0
        return out

    def _generator_block(self, X, system):
        _, grad, hess = self._derivatives(X)
        b = system.drift(X)
        a = system.diffusion_tensor(X)
        return np.einsum("mi,mni->mn", b, grad) + 0.5 * np.einsum("mij,mnij->mn", a, hess)

    def _derivatives(self, X):
        raise UnsupportedDictionary(f"{type(self).__name__} has no analytic derivatives")


class RbfDictionary(BaseDictionary):
    """Constant plus Gaussian bumps ``exp(-|x - c_j|^2 / (2 h^2))``.

    Without explicit ``centers`` the centres sit at the midpoints of a uniform
    ``n_centers_per_axis``-per-axis grid over ``domain`` (or over the bounding
    box of the fitting data).  The default bandwidth is the mean grid spacing.
    """

    kind = "rbf"

    def __init__(self, n_centers_per_axis=10, bandwidth=None, domain=None, centers=None):
        self.n_centers_per_axis = n_centers_per_axis
        self.bandwidth = bandwidth
        self.domain = domain
        self.centers = centers

    def _fit(self, X):
        d = X.shape[1]
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=float).reshape(-1, d)
            spacing = None
        else:
            if self.domain is not None:
                bounds = np.asarray(self.domain, dtype=float).reshape(d, 2)
            else:
                bounds = np.stack([X.min(axis=0), X.max(axis=0)], axis=1)
            k = int(self.n_centers_per_axis)
            axes = [lo + (np.arange(k) + 0.5) * (hi - lo) / k for lo, hi in bounds]
            centers = np.array(list(itertools.product(*axes)))
            spacing = float(np.mean((bounds[:, 1] - bounds[:, 0]) / k))
        if self.bandwidth is not None:
            h = float(self.bandwidth)
        elif spacing is not None:
            h = spacing
        elif len(centers) > 1:
            diff = centers[:, None, :] - centers[None, :, :]
            dist = np.sqrt((diff**2).sum(-1))
            dist[dist == 0] = np.inf
            h = float(np.mean(dist.min(axis=1)))
        else:
            h = 1.0
        if not h > 0:
            raise InvalidInput("RBF bandwidth must be positive")
        self.centers_ = centers
        self.bandwidth_ = h

    def _size(self):
        return 1 + len(self.centers_)

    def _kernel(self, X):
        diff = X[:, None, :] - self.centers_[None, :, :]
        return diff, np.exp(-0.5 * (diff**2).sum(-1) / self.bandwidth_**2)

    def _values(self, X):
        out = np.ones((X.shape[0], self._size()))
        out[:, 1:] = self._kernel(X)[1]
        return out

    def _derivatives(self, X):
        h2 = self.bandwidth_**2
        diff, k = self._kernel(X)
        m, d = X.shape
        vals = np.ones((m, self._size()))
        vals[:, 1:] = k
        grad = np.zeros((m, self._size(), d))
        grad[:, 1:] = -diff / h2 * k[..., None]
        hess = np.zeros((m, self._size(), d, d))
        hess[:, 1:] = k[..., None, None] * (diff[..., :, None] * diff[..., None, :] / h2**2 - np.eye(d) / h2)
        return vals, grad, hess

    def _generator_block(self, X, system):
        # closed form, avoids materialising the (m, N, d, d) Hessian
        h2 = self.bandwidth_**2
        diff, k = self._kernel(X)
        b = system.drift(X)
        a = system.diffusion_tensor(X)
        first = -np.einsum("mi,mni->mn", b, diff) / h2
        quad = np.einsum("mni,mij,mnj->mn", diff, a, diff) / h2**2
        trace = np.trace(a, axis1=-2, axis2=-1)[:, None] / h2
        out = np.zeros((X.shape[0], self._size()))
        out[:, 1:] = k * (first + 0.5 * (quad - trace))
        return out


def _multi_indices(d, degree):
    """Exponent tuples of total degree <= ``degree``, graded, constant first."""
    idx = [e for e in itertools.product(range(degree + 1), repeat=d) if sum(e) <= degree]
    return sorted(idx, key=lambda e: (sum(e), tuple(-v for v in e)))


class _TensorPolynomialDictionary(BaseDictionary):
    """Products of one-dimensional polynomial families over a graded index set."""

    def __init__(self, degree=2):
        self.degree = degree

    def _fit(self, X):
        if int(self.degree) < 0:
            raise InvalidInput("degree must be non-negative")
        self.exponents_ = np.array(_multi_indices(X.shape[1], int(self.degree)), dtype=int)

    def _size(self):
        return len(self.exponents_)

    def _tables(self, X):
        """Per-axis tables ``(m, d, degree+1)`` of the family and its first two derivatives."""
        raise NotImplementedError

    def _derivatives(self, X):
        p0, p1, p2 = self._tables(X)
        m, d = X.shape
        e = self.exponents_
        axes = np.arange(d)
        # f[m, n, i] = P_{e[n, i]}(x_i) and likewise for the derivatives
        f = p0[:, axes, e]
        f1 = p1[:, axes, e]
        f2 = p2[:, axes, e]
        vals = np.prod(f, axis=-1)
        grad = np.empty((m, len(e), d))
        hess = np.empty((m, len(e), d, d))
        for i in range(d):
            gi = f.copy()
            gi[..., i] = f1[..., i]
            grad[..., i] = np.prod(gi, axis=-1)
            for j in range(d):
                hij = f.copy()
                if i == j:
                    hij[..., i] = f2[..., i]
                else:
                    hij[..., i] = f1[..., i]
                    hij[..., j] = f1[..., j]
                hess[..., i, j] = np.prod(hij, axis=-1)
        return vals, grad, hess

    def _values(self, X):
        p0 = self._tables(X)[0]
        axes = np.arange(X.shape[1])
        return np.prod(p0[:, axes, self.exponents_], axis=-1)


class MonomialDictionary(_TensorPolynomialDictionary):
    """All monomials ``x^alpha`` with ``|alpha| <= degree``."""

    kind = "monomial"

    def _tables(self, X):
        p = int(self.degree)
        n = np.arange(p + 1)
        m, d = X.shape
        p0 = np.ones((m, d, p + 1))
        for k in range(1, p + 1):
            p0[..., k] = p0[..., k - 1] * X
        p1 = np.zeros_like(p0)
        p2 = np.zeros_like(p0)
        p1[..., 1:] = n[1:] * p0[..., :-1]
        if p >= 2:
            p2[..., 2:] = n[2:] * (n[2:] - 1) * p0[..., :-2]
        return p0, p1, p2


class HermiteDictionary(_TensorPolynomialDictionary):
    """Products of probabilists' Hermite polynomials ``He_n`` (``He_2(x) = x^2 - 1``)."""

    kind = "hermite"

    def _tables(self, X):
        p = int(self.degree)
        m, d = X.shape
        p0 = np.ones((m, d, p + 1))
        if p >= 1:
            p0[..., 1] = X
        for k in range(2, p + 1):
            p0[..., k] = X * p0[..., k - 1] - (k - 1) * p0[..., k - 2]
        # He_n' = n He_{n-1}
        n = np.arange(p + 1)
        p1 = np.zeros_like(p0)
        p2 = np.zeros_like(p0)
        p1[..., 1:] = n[1:] * p0[..., :-1]
        if p >= 2:
            p2[..., 2:] = n[2:] * (n[2:] - 1) * p0[..., :-2]
        return p0, p1, p2


class TrainableDictionary(BaseDictionary):
    """Constant channel, optionally the raw state, then the outputs of a tanh MLP.

    ``hidden`` lists the hidden widths and ``n_outputs`` the learned channels,
    so ``hidden=(16,), n_outputs=8`` on 2-D data is a 2-16-8 network.  The
    generator uses exact forward-mode first and second input derivatives.
    """

    kind = "trainable"

    def __init__(self, hidden=(16,), n_outputs=8, include_state=False, activation="tanh", seed=0):
        self.hidden = hidden
        self.n_outputs = n_outputs
        self.include_state = include_state
        self.activation = activation
        self.seed = seed

    def _fit(self, X):
        if getattr(self, "net_", None) is not None and self.net_.n_inputs == X.shape[1]:
            return
        sizes = [X.shape[1], *[int(h) for h in self.hidden], int(self.n_outputs)]
        self.net_ = Mlp(sizes, self.activation, rng=np.random.default_rng(self.seed))

    @property
    def n_fixed(self) -> int:
        """Number of leading channels not produced by the network."""
        return 1 + (self.n_features_in_ if self.include_state else 0)

    def _size(self):
        return self.n_fixed + self.net_.n_outputs

    def _values(self, X):
        parts = [np.ones((X.shape[0], 1))]
        if self.include_state:
            parts.append(X)
        parts.append(self.net_.forward(X))
        return np.hstack(parts)

    def _derivatives(self, X):
        m, d = X.shape
        out, jac, hess = self.net_.input_derivatives(X, order=2)
        n_fixed = self.n_fixed
        vals = np.empty((m, self._size()))
        grad = np.zeros((m, self._size(), d))
        hs = np.zeros((m, self._size(), d, d))
        vals[:, 0] = 1.0
        if self.include_state:
            vals[:, 1:n_fixed] = X
            grad[:, 1:n_fixed] = np.eye(d)
        vals[:, n_fixed:] = out
        grad[:, n_fixed:] = jac
        hs[:, n_fixed:] = hess
        return vals, grad, hs


_KINDS = {
    "rbf": RbfDictionary,
    "monomial": MonomialDictionary,
    "hermite": HermiteDictionary,
    "trainable": TrainableDictionary,
}


def make_dictionary(kind: str, **params) -> BaseDictionary:
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise InvalidInput(f"unknown dictionary kind {kind!r}; choose from {DICTIONARY_KINDS}") from None
    return cls(**params)


def evaluate(dictionary: BaseDictionary, points) -> np.ndarray:
    return dictionary.transform(points)


def generator_apply(dictionary: BaseDictionary, system, points) -> np.ndarray:
    return dictionary.generator(points, system)


def finite_diff_generator(psi_x, psi_y, dt: float) -> np.ndarray:
    """Data-pair surrogate ``(psi(y) - psi(x)) / dt`` for the generator images."""
    psi_x = np.asarray(psi_x)
    psi_y = np.asarray(psi_y)
    if psi_x.shape != psi_y.shape:
        raise ShapeMismatch(f"{psi_x.shape} vs {psi_y.shape}")
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    return (psi_y - psi_x) / dt


def derivative_check(dictionary: BaseDictionary, point, tolerance=1e-4, step=1e-5) -> dict:
    """Compare analytic input gradients and Hessians with central differences.

    The Hessian reference differentiates the analytic gradient.  Errors are
    measured as ``|analytic - fd| / (1 + |analytic|)``.
    """
    x = np.atleast_2d(np.asarray(point, dtype=float))
    _, grad, hess = dictionary.derivatives(x)
    d = x.shape[1]
    fd_grad = np.empty_like(grad)
    fd_hess = np.empty_like(hess)
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        fd_grad[:, :, i] = (dictionary.transform(x + e) - dictionary.transform(x - e)) / (2 * step)
        _, gp, _ = dictionary.derivatives(x + e)
        _, gm, _ = dictionary.derivatives(x - e)
        fd_hess[:, :, :, i] = (gp - gm) / (2 * step)
    err_grad = float(np.max(np.abs(grad - fd_grad) / (1.0 + np.abs(grad))))
    err_hess = float(np.max(np.abs(hess - fd_hess) / (1.0 + np.abs(hess))))
    worst = max(err_grad, err_hess)
    return {
        "kind": dictionary.kind,
        "point": x[0].tolist(),
        "max_rel_error_gradient": err_grad,
        "max_rel_error_hessian": err_hess,
        "max_rel_error": worst,
        "tolerance": tolerance,
        "passed": worst < tolerance,
    }
