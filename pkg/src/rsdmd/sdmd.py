"""Stochastic dynamic mode decomposition.

The semigroup estimate is ``K = I + dt * G^{-1} H`` with Gram matrices
``G = Psi_X^* Psi_X / m`` and ``H = Psi_X^* Psi'_X / m``, where ``Psi'``
holds generator images of the dictionary (analytic) or their data-pair
surrogate ``(Psi_Y - Psi_X) / dt`` (``finite_diff``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .dictionary import BaseDictionary, TrainableDictionary, finite_diff_generator
from .exceptions import InvalidInput, NonFiniteUpdate, ShapeMismatch, SingularGram, UnsupportedDictionary
from .neural import OptimizerState, optimizer_step

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12
MAX_CONDITION = 1e12
GENERATOR_MODES = ("analytic", "finite_diff")


@dataclass
class KoopmanEstimate:
    g: np.ndarray
    h: np.ndarray
    k: np.ndarray
    dt: float
    eigenvalues_mu: np.ndarray
    eigenvalues_lambda: np.ndarray
    eigenvectors: np.ndarray
    regularization: float
    degenerate: np.ndarray = field(default=None)
    branch_ambiguous: np.ndarray = field(default=None)
    unresolved: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.eigenvalues_mu)
        for name in ("degenerate", "branch_ambiguous", "unresolved"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=bool))

    @property
    def size(self) -> int:
        return self.k.shape[0]

    @property
    def retained(self) -> np.ndarray:
        """Indices of modes with a well-defined generator eigenvalue, in |mu| order."""
        return np.flatnonzero(~(self.degenerate | self.branch_ambiguous | self.unresolved))

    def leading(self, n_modes) -> np.ndarray:
        return self.retained[: int(n_modes)]

    def residuals(self) -> np.ndarray:
        """``|K xi_i - mu_i xi_i|`` per mode."""
        r = self.k @ self.eigenvectors - self.eigenvectors * self.eigenvalues_mu
        return np.linalg.norm(r, axis=0)

    def to_dict(self) -> dict:
        def cplx(a):
            a = np.asarray(a)
            return np.stack([a.real, a.imag], axis=-1).tolist()

        lam = np.where(np.isfinite(self.eigenvalues_lambda), self.eigenvalues_lambda, np.nan)
        return {
            "version": 1,
            "dt": self.dt,
            "regularization": self.regularization,
            "g": np.asarray(self.g).tolist(),
            "h": np.asarray(self.h).tolist(),
            "k": np.asarray(self.k).tolist(),
            "eigenvalues_mu": cplx(self.eigenvalues_mu),
            "eigenvalues_lambda": [[None, None] if not np.isfinite(v) else [v.real, v.imag] for v in lam],
            "eigenvectors": cplx(self.eigenvectors),
            "degenerate": self.degenerate.tolist(),
            "branch_ambiguous": self.branch_ambiguous.tolist(),
            "unresolved": self.unresolved.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KoopmanEstimate":
        def cplx(a):
            a = np.asarray(a, dtype=float)
            return a[..., 0] + 1j * a[..., 1]

        lam = np.array([complex(np.nan, np.nan) if v[0] is None else complex(*v) for v in data["eigenvalues_lambda"]])
        return cls(
            g=np.asarray(data["g"], dtype=float), h=np.asarray(data["h"], dtype=float),
            k=np.asarray(data["k"], dtype=float), dt=float(data["dt"]),
            eigenvalues_mu=cplx(data["eigenvalues_mu"]), eigenvalues_lambda=lam,
            eigenvectors=cplx(data["eigenvectors"]), regularization=float(data["regularization"]),
            degenerate=np.asarray(data["degenerate"], dtype=bool),
            branch_ambiguous=np.asarray(data["branch_ambiguous"], dtype=bool),
            unresolved=np.asarray(data.get("unresolved", [False] * len(lam)), dtype=bool),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "KoopmanEstimate":
        return cls.from_dict(json.loads(text))


@dataclass
class SpectralConsistencyReport:
    total: float
    per_mode: np.ndarray
    modes_used: int
    mode_indices: np.ndarray


def build_gram(psi_x, psi_prime_x):
    """``G = Psi_X^* Psi_X / m`` and ``H = Psi_X^* Psi'_X / m``."""
    psi_x = np.asarray(psi_x)
    psi_prime_x = np.asarray(psi_prime_x)
    if psi_x.ndim != 2 or psi_x.shape != psi_prime_x.shape or psi_x.shape[0] < 1:
        raise ShapeMismatch(f"{psi_x.shape} vs {psi_prime_x.shape}")
    m = psi_x.shape[0]
    xh = psi_x.conj().T
    g = xh @ psi_x / m
    g = 0.5 * (g + g.conj().T)
    h = xh @ psi_prime_x / m
    return g, h


def default_ridge(g) -> float:
    n = g.shape[0]
    return 1e-8 * float(np.real(np.trace(g))) / n


def estimate_koopman(g, h, dt: float, ridge=None, on_singular="pinv", rank_tol=None) -> KoopmanEstimate:
    """Semigroup matrix ``I + dt (G + ridge I)^{-1} H`` and its eigendecomposition.

    ``ridge=None`` uses ``1e-8 * trace(G) / N``.  With ``rank_tol`` set, the
    solve is restricted to the eigenspace of ``G`` with eigenvalues above
    ``rank_tol * max_eig(G)``; directions the data does not support get
    ``mu = 1`` and are flagged ``unresolved``.  The same truncated solve (at
    ``1e-12``) is the fallback when ``G + ridge I`` has a condition number
    above 1e12, unless ``on_singular="raise"``.
    """
    g = np.asarray(g)
    h = np.asarray(h)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape != h.shape:
        raise ShapeMismatch(f"G {g.shape} and H {h.shape} must be equal square matrices")
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    n = g.shape[0]
    ridge = default_ridge(g) if ridge is None else float(ridge)
    if ridge < 0:
        raise InvalidInput("ridge must be non-negative")
    if rank_tol is not None:
        return _truncated_estimate(g, h, dt, ridge, float(rank_tol))
    gr = g + ridge * np.eye(n)
    cond = np.linalg.cond(gr)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        if on_singular == "raise":
            raise SingularGram(f"regularised Gram matrix has condition number {cond:.3g}")
        logger.debug("Gram condition %.3g, using truncated pseudo-inverse", cond)
        return _truncated_estimate(g, h, dt, ridge, 1.0 / MAX_CONDITION)
    k = np.eye(n) + dt * np.linalg.solve(gr, h)
    return decompose(g, h, k, dt, ridge)


def _truncated_estimate(g, h, dt, ridge, rank_tol):
    n = g.shape[0]
    s, u = np.linalg.eigh(g)
    keep = s > rank_tol * max(float(s.max()), 0.0)
    if not np.any(keep):
        raise SingularGram("Gram matrix is numerically zero")
    u_r = u[:, keep]
    # coefficients of G^+ H in the retained eigenbasis, shape (r, N)
    coef = (u_r.conj().T @ h) / (s[keep] + ridge)[:, None]
    k = np.eye(n) + dt * (u_r @ coef)
    reduced = np.eye(u_r.shape[1]) + dt * (coef @ u_r)
    mu_r, xi_r = np.linalg.eig(reduced)
    xi = u_r @ xi_r.astype(complex)
    n_null = n - u_r.shape[1]
    if n_null:
        # eigenvalue 1 of K: vectors annihilated by coef
        _, _, vh = np.linalg.svd(coef)
        null = vh[-n_null:].conj().T.astype(complex)
        mu = np.concatenate([mu_r.astype(complex), np.ones(n_null, dtype=complex)])
        xi = np.hstack([xi, null])
    else:
        mu = mu_r.astype(complex)
    unresolved = np.zeros(n, dtype=bool)
    unresolved[n - n_null:] = True
    return decompose(g, h, k, dt, ridge, eig=(mu, xi), unresolved=unresolved)


def decompose(g, h, k, dt, ridge, eig=None, unresolved=None) -> KoopmanEstimate:
    """Sort eigenpairs (resolved modes first, each group by |mu| descending) and attach generator eigenvalues."""
    if eig is None:
        mu, xi = np.linalg.eig(k)
    else:
        mu, xi = eig
    mu = np.asarray(mu).astype(complex)
    xi = np.asarray(xi).astype(complex)
    if unresolved is None:
        unresolved = np.zeros(mu.shape, dtype=bool)
    order = np.lexsort((-mu.imag, -np.abs(mu), unresolved))
    mu = mu[order]
    xi = xi[:, order]
    unresolved = unresolved[order]
    degenerate = np.abs(mu) < DEGENERATE_TOL
    # principal log is ambiguous on the negative real axis
    branch = (~degenerate) & (mu.real < 0) & (np.abs(mu.imag) <= 1e-12 * np.maximum(np.abs(mu), 1.0))
    lam = np.full(mu.shape, complex(np.nan, np.nan))
    ok = ~(degenerate | branch | unresolved)
    lam[ok] = np.log(mu[ok]) / dt
    return KoopmanEstimate(g=g, h=h, k=k, dt=float(dt), eigenvalues_mu=mu, eigenvalues_lambda=lam,
                           eigenvectors=xi, regularization=float(ridge), degenerate=degenerate,
                           branch_ambiguous=branch, unresolved=unresolved)


def normalize_columns(phi, reference=None):
    """Scale each column so its largest-modulus entry (over ``reference`` rows) is real and equal to 1."""
    phi = np.asarray(phi, dtype=complex)
    ref = phi if reference is None else np.asarray(reference, dtype=complex)
    if ref.shape[0] == 0:
        return phi
    idx = np.argmax(np.abs(ref), axis=0)
    anchor = ref[idx, np.arange(ref.shape[1])]
    scale = np.where(np.abs(anchor) > 0, anchor, 1.0)
    return phi / scale


def eigenfunction_values(est: KoopmanEstimate, psi_at_points, modes=None):
    """``Psi Xi`` normalised to unit max modulus with a positive-real anchor per column."""
    psi = np.asarray(psi_at_points)
    if psi.ndim != 2 or psi.shape[1] != est.size:
        raise ShapeMismatch(f"expected width {est.size}, got {psi.shape}")
    xi = est.eigenvectors if modes is None else est.eigenvectors[:, modes]
    return normalize_columns(psi @ xi)


def spectral_consistency(est: KoopmanEstimate, psi_x, psi_y, weights=None, n_modes=None) -> SpectralConsistencyReport:
    """Per-mode ``sum_r w_r |phi_i(y_r) - mu_i phi_i(x_r)|^2`` over the leading retained modes.

    Eigenfunctions are normalised jointly over the ``x`` and ``y`` rows.
    ``weights`` defaults to the uniform empirical measure ``1/m``.
    """
    psi_x = np.asarray(psi_x)
    psi_y = np.asarray(psi_y)
    if psi_x.shape != psi_y.shape or psi_x.ndim != 2 or psi_x.shape[1] != est.size:
        raise ShapeMismatch(f"{psi_x.shape} vs {psi_y.shape} for a size-{est.size} estimate")
    m = psi_x.shape[0]
    modes = est.retained if n_modes is None else est.leading(n_modes)
    if weights is None:
        w = np.full(m, 1.0 / m)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (m,) or np.any(w < 0) or not w.sum() > 0:
            raise InvalidInput("weights must be a non-negative vector with positive sum")
        w = w / w.sum()
    xi = est.eigenvectors[:, modes]
    phi_x = psi_x @ xi
    phi_y = psi_y @ xi
    scale_ref = np.vstack([phi_x, phi_y])
    idx = np.argmax(np.abs(scale_ref), axis=0)
    anchor = scale_ref[idx, np.arange(len(modes))]
    anchor = np.where(np.abs(anchor) > 0, anchor, 1.0)
    resid = phi_y / anchor - est.eigenvalues_mu[modes] * (phi_x / anchor)
    per_mode = w @ (np.abs(resid) ** 2)
    per_mode = np.asarray(per_mode, dtype=float).reshape(len(modes))
    return SpectralConsistencyReport(total=float(per_mode.sum()), per_mode=per_mode,
                                     modes_used=len(modes), mode_indices=np.asarray(modes))


GRAM_CHUNK = 100_000


def _check_snapshots(X, Y, n_features=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y is not None:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape != X.shape:
            raise ShapeMismatch(f"X {X.shape} and Y {Y.shape} differ")
    if X.shape[0] < 1:
        raise InvalidInput("need at least one snapshot")
    if not np.all(np.isfinite(X)) or (Y is not None and not np.all(np.isfinite(Y))):
        raise InvalidInput("snapshots contain non-finite values")
    return X, Y


class SDMD(BaseEstimator):
    """Estimator of the stochastic Koopman semigroup over one sampling interval.

    Parameters
    ----------
    dictionary : BaseDictionary
        Observables; cloned and fitted on ``X`` unless already fitted.
    system : SdeSystem, optional
        Required by ``generator="analytic"``.
    dt : float
        Sampling interval of the snapshot pairs.
    generator : {"analytic", "finite_diff"}
        Source of the generator images in ``H``.
    ridge : float or None
        Tikhonov shift added to ``G``; ``None`` picks ``1e-8 trace(G) / N``.
    n_modes : int
        Number of leading modes used by ``score`` and ``transform``.
    rank_tol : float or None
        Relative eigenvalue cut-off on ``G``; directions below it are treated
        as unsupported by the data (see ``estimate_koopman``).
    """

    def __init__(self, dictionary=None, system=None, dt=0.01, generator="analytic", ridge=None, n_modes=5,
                 rank_tol=None):
        self.dictionary = dictionary
        self.system = system
        self.dt = dt
        self.generator = generator
        self.ridge = ridge
        self.n_modes = n_modes
        self.rank_tol = rank_tol

    def _dictionary(self, X):
        if self.dictionary is None:
            raise InvalidInput("SDMD needs a dictionary")
        if hasattr(self.dictionary, "n_features_in_"):
            return self.dictionary
        return clone(self.dictionary).fit(X)

    def fit(self, X, Y=None):
        if self.generator not in GENERATOR_MODES:
            raise InvalidInput(f"generator must be one of {GENERATOR_MODES}")
        X, Y = _check_snapshots(X, Y)
        dictionary = self._dictionary(X)
        if self.generator == "analytic" and self.system is None:
            raise InvalidInput("analytic generator mode requires the system")
        if self.generator == "finite_diff" and Y is None:
            raise InvalidInput("finite_diff generator mode requires Y")
        # Gram sums are accumulated in row blocks so that large pooled
        # archives never materialise the full dictionary matrix
        m = X.shape[0]
        g = h = 0.0
        for start in range(0, m, GRAM_CHUNK):
            rows = slice(start, start + GRAM_CHUNK)
            psi_x = dictionary.transform(X[rows])
            if self.generator == "analytic":
                psi_prime = dictionary.generator(X[rows], self.system)
            else:
                psi_prime = finite_diff_generator(psi_x, dictionary.transform(Y[rows]), self.dt)
            gc, hc = build_gram(psi_x, psi_prime)
            w = psi_x.shape[0] / m
            g = g + w * gc if start else gc * w
            h = h + w * hc if start else hc * w
        self.dictionary_ = dictionary
        self.g_, self.h_ = g, h
        self.estimate_ = estimate_koopman(self.g_, self.h_, self.dt, self.ridge, rank_tol=self.rank_tol)
        self.n_features_in_ = X.shape[1]
        return self

    def fit_snapshots(self, data):
        """Fit from a ``SnapshotData`` bundle (its ``dt`` must match)."""
        if not np.isclose(data.dt, self.dt):
            raise InvalidInput(f"snapshot dt {data.dt} != estimator dt {self.dt}")
        return self.fit(data.x, data.y)

    @property
    def eigenvalues_(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.eigenvalues_mu

    @property
    def generator_eigenvalues_(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.eigenvalues_lambda

    @property
    def koopman_matrix_(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.k

    def transform(self, X):
        """Normalised values of the leading ``n_modes`` eigenfunctions at ``X``."""
        check_is_fitted(self, "estimate_")
        psi = self.dictionary_.transform(X)
        return eigenfunction_values(self.estimate_, psi, self.estimate_.leading(self.n_modes))

    def predict(self, X):
        """Expected dictionary values one interval ahead, ``Psi(X) K``."""
        check_is_fitted(self, "estimate_")
        return self.dictionary_.transform(X) @ self.estimate_.k

    def spectral_consistency(self, X, Y, weights=None):
        check_is_fitted(self, "estimate_")
        X, Y = _check_snapshots(X, Y, self.n_features_in_)
        return spectral_consistency(self.estimate_, self.dictionary_.transform(X), self.dictionary_.transform(Y),
                                    weights=weights, n_modes=self.n_modes)

    def score(self, X, Y):
        """Negative spectral consistency (higher is better)."""
        return -self.spectral_consistency(X, Y).total


def edmd_operator(psi_x, psi_y, ridge=0.0):
    """Least-squares EDMD matrix ``G^{-1} (Psi_X^* Psi_Y / m)``."""
    psi_x = np.asarray(psi_x)
    psi_y = np.asarray(psi_y)
    m = psi_x.shape[0]
    g = psi_x.conj().T @ psi_x / m
    a = psi_x.conj().T @ psi_y / m
    return np.linalg.solve(g + ridge * np.eye(g.shape[0]), a)


def _pair_koopman(psi_x, psi_y, ridge):
    m = psi_x.shape[0]
    g = psi_x.T @ psi_x / m
    c = psi_x.T @ psi_y / m
    gr = g + ridge * np.eye(g.shape[0])
    return gr, np.eye(g.shape[0]) + np.linalg.solve(gr, c - g)


def dictionary_objective(psi_x, psi_y, k, gamma_reg=0.0, ridge=None):
    """Per-row dictionary-learning loss and its gradients with respect to ``Psi_X`` and ``Psi_Y``.

    The data term ``|Psi_Y - Psi_X K|_F^2 / m`` holds ``K`` fixed.  The
    regulariser ``gamma |K(theta)|_F^2`` is differentiated through the
    data-pair estimate ``K(theta) = I + (G + ridge I)^{-1}(C - G)`` with
    ``C = Psi_X^T Psi_Y / m``.
    """
    m = psi_x.shape[0]
    err = psi_y - psi_x @ k
    loss = float(np.sum(err**2) / m)
    d_x = -2.0 * err @ k.T / m
    d_y = 2.0 * err / m
    if gamma_reg > 0:
        r = default_ridge(psi_x.T @ psi_x / m) if ridge is None else ridge
        gr, kp = _pair_koopman(psi_x, psi_y, r)
        loss += gamma_reg * float(np.sum(kp**2))
        b = 2.0 * np.linalg.solve(gr.T, kp)
        p = b @ kp.T
        d_x += gamma_reg * (psi_y @ b.T - psi_x @ (p + p.T)) / m
        d_y += gamma_reg * (psi_x @ b) / m
    return loss, d_x, d_y


def train_dictionary(data, dictionary: TrainableDictionary, gamma_reg=0.0, epochs=10, batch=256,
                     learning_rate=1e-3, ridge=None, system=None, seed=0, optimizer=None):
    """Alternating SDMD-DL training of a trainable dictionary.

    Each epoch (a) recomputes ``K`` with fixed network weights, then (b) makes
    one shuffled minibatch pass of Adam on the dictionary objective with ``K``
    fixed.  The constant channel (and the raw-state channels, if any) are not
    trainable.  Returns the dictionary, the final estimate, and the per-epoch
    full-data loss history (index 0 is the loss before training).
    """
    if not isinstance(dictionary, TrainableDictionary):
        raise UnsupportedDictionary("train_dictionary needs a trainable dictionary")
    if not hasattr(dictionary, "n_features_in_"):
        dictionary.fit(data.x)
    sdmd_kwargs = dict(dt=data.dt, ridge=ridge)

    def estimate():
        if system is not None:
            est = SDMD(dictionary, system=system, generator="analytic", **sdmd_kwargs).fit(data.x)
        else:
            est = SDMD(dictionary, generator="finite_diff", **sdmd_kwargs).fit(data.x, data.y)
        return est.estimate_

    def full_loss(k):
        return dictionary_objective(dictionary.transform(data.x), dictionary.transform(data.y), k, gamma_reg, ridge)[0]

    est = estimate()
    history = [full_loss(est.k.real)]
    state = optimizer or OptimizerState("adam", learning_rate)
    rng = np.random.default_rng(seed)
    net = dictionary.net_
    n_fixed = dictionary.n_fixed
    m = data.n_samples
    for _ in range(int(epochs)):
        k = est.k.real
        order = rng.permutation(m)
        for start in range(0, m, int(batch)):
            idx = order[start:start + int(batch)]
            xb, yb = data.x[idx], data.y[idx]
            psi_x = dictionary.transform(xb)
            psi_y = dictionary.transform(yb)
            _, d_x, d_y = dictionary_objective(psi_x, psi_y, k, gamma_reg, ridge)
            net.forward(xb)
            gx = net.backward(d_x[:, n_fixed:])
            net.forward(yb)
            gy = net.backward(d_y[:, n_fixed:])
            grads = [a + b for a, b in zip(gx, gy)]
            optimizer_step(net, grads, state)
        est = estimate()
        history.append(full_loss(est.k.real))
    if not all(np.all(np.isfinite(p)) for p in net.params):
        raise NonFiniteUpdate("dictionary parameters became non-finite")
    return dictionary, est, history
