"""Benchmark stochastic systems and Euler-Maruyama trajectory generation.

Drift and diffusion callables are vectorised over leading axes: ``drift``
maps ``(..., d) -> (..., d)`` and ``diffusion`` maps ``(..., d) -> (..., d, m)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .exceptions import ConfigError, IntegrationDiverged, InvalidInput

Array = np.ndarray


@dataclass(frozen=True)
class SdeSystem:
    """``dX = drift(X) dt + diffusion(X) dW`` on a box-shaped domain."""

    name: str
    dim: int
    noise_dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    domain: tuple[tuple[float, float], ...]
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise InvalidInput("dim and noise_dim must be positive")
        if len(self.domain) != self.dim:
            raise InvalidInput(f"domain has {len(self.domain)} axes, expected {self.dim}")

    @property
    def lower(self) -> Array:
        return np.array([lo for lo, _ in self.domain], dtype=float)

    @property
    def upper(self) -> Array:
        return np.array([hi for _, hi in self.domain], dtype=float)

    def diffusion_tensor(self, x: Array) -> Array:
        """``sigma sigma^T`` evaluated at ``x``; shape ``(..., d, d)``."""
        s = self.diffusion(np.asarray(x, dtype=float))
        return np.einsum("...ik,...jk->...ij", s, s)


@dataclass(frozen=True)
class SnapshotData:
    """Snapshot pairs: row ``k`` of ``y`` is the ``dt``-successor of row ``k`` of ``x``."""

    x: Array
    y: Array
    dt: float
    seed: int = 0

    def __post_init__(self):
        if self.x.shape != self.y.shape or self.x.ndim != 2 or self.x.shape[0] < 1:
            raise InvalidInput(f"x and y must be equal (m, d) arrays, got {self.x.shape} and {self.y.shape}")
        if not self.dt > 0:
            raise InvalidInput("dt must be positive")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @classmethod
    def concatenate(cls, parts: list["SnapshotData"]) -> "SnapshotData":
        if not parts:
            raise InvalidInput("nothing to concatenate")
        dts = {p.dt for p in parts}
        if len(dts) != 1:
            raise InvalidInput(f"mixed sampling intervals {sorted(dts)}")
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            parts[0].dt,
            parts[0].seed,
        )


def euler_maruyama_step(system: SdeSystem, state, dt: float, noise) -> Array:
    """One Euler-Maruyama step; ``noise`` is a standard normal draw, scaled by sqrt(dt) here."""
    state = np.asarray(state, dtype=float)
    noise = np.asarray(noise, dtype=float)
    out = state + system.drift(state) * dt + np.einsum("...ij,...j->...i", system.diffusion(state), np.sqrt(dt) * noise)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(f"non-finite state after step from {state}", state=state)
    return out


def simulate_trajectory(system: SdeSystem, x0, n_steps: int, dt: float, seed: int) -> SnapshotData:
    """Integrate ``n_steps`` steps from ``x0`` and return the ``n_steps`` consecutive pairs."""
    if n_steps < 1:
        raise InvalidInput("n_steps must be positive")
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(system.dim)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_steps, system.noise_dim))
    path = np.empty((n_steps + 1, system.dim))
    path[0] = x0
    for k in range(n_steps):
        try:
            path[k + 1] = euler_maruyama_step(system, path[k], dt, noise[k])
        except IntegrationDiverged as exc:
            raise IntegrationDiverged(f"trajectory diverged at step {k}", state=exc.state, step=k) from None
    return SnapshotData(path[:-1].copy(), path[1:].copy(), float(dt), int(seed))


def simulate_batch(system: SdeSystem, x0s, n_steps: int, dt: float, seeds) -> list[SnapshotData]:
    """Vectorised ``simulate_trajectory`` over several starting points.

    Each trajectory uses its own seed and reproduces ``simulate_trajectory``
    bit for bit.
    """
    x0s = np.asarray(x0s, dtype=float).reshape(-1, system.dim)
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(x0s):
        raise InvalidInput("one seed per starting point required")
    noise = np.stack([np.random.default_rng(s).standard_normal((n_steps, system.noise_dim)) for s in seeds], axis=1)
    path = np.empty((n_steps + 1, len(x0s), system.dim))
    path[0] = x0s
    for k in range(n_steps):
        try:
            path[k + 1] = euler_maruyama_step(system, path[k], dt, noise[k])
        except IntegrationDiverged as exc:
            raise IntegrationDiverged(f"trajectory diverged at step {k}", state=exc.state, step=k) from None
    return [SnapshotData(path[:-1, i].copy(), path[1:, i].copy(), float(dt), s) for i, s in enumerate(seeds)]


def _constant_diagonal(sigmas):
    sig = np.diag(np.asarray(sigmas, dtype=float))

    def diffusion(x):
        x = np.asarray(x)
        return np.broadcast_to(sig, x.shape[:-1] + sig.shape)

    return diffusion


def double_well(sigma1=1.09, sigma2=1.09, domain=((-3.0, 3.0), (-4.0, 4.0))) -> SdeSystem:
    """Overdamped Langevin dynamics in ``V(x, y) = (x^2 - 1)^2 + y^2``."""

    def drift(s):
        s = np.asarray(s, dtype=float)
        x, y = s[..., 0], s[..., 1]
        return np.stack([-4.0 * x * (x * x - 1.0), -2.0 * y], axis=-1)

    return SdeSystem("double_well", 2, 2, drift, _constant_diagonal([sigma1, sigma2]),
                     _as_domain(domain), {"sigma1": sigma1, "sigma2": sigma2})


def duffing(delta=0.5, alpha=-1.0, beta=1.0, sigma=0.15, domain=((-2.0, 2.0), (-2.0, 2.0))) -> SdeSystem:
    """Damped Duffing oscillator with additive noise on the velocity."""

    def drift(s):
        s = np.asarray(s, dtype=float)
        x, v = s[..., 0], s[..., 1]
        return np.stack([v, -delta * v - alpha * x - beta * x**3], axis=-1)

    sig = np.array([[0.0], [sigma]])

    def diffusion(s):
        s = np.asarray(s)
        return np.broadcast_to(sig, s.shape[:-1] + sig.shape)

    return SdeSystem("duffing", 2, 1, drift, diffusion, _as_domain(domain),
                     {"delta": delta, "alpha": alpha, "beta": beta, "sigma": sigma})


def fitzhugh_nagumo(eps=0.01, a1=0.5, a2=0.1, sigma1=1e-3, sigma2=1e-5,
                    domain=((-2.5, 2.5), (-1.0, 2.0))) -> SdeSystem:
    def drift(s):
        s = np.asarray(s, dtype=float)
        x, y = s[..., 0], s[..., 1]
        return np.stack([x - x**3 / 3.0 - y, eps * (x + a1 - a2 * y)], axis=-1)

    return SdeSystem("fhn", 2, 2, drift, _constant_diagonal([sigma1, sigma2]), _as_domain(domain),
                     {"eps": eps, "a1": a1, "a2": a2, "sigma1": sigma1, "sigma2": sigma2})


def ornstein_uhlenbeck(theta=1.0, sigma=float(np.sqrt(2.0)), dim=1, domain=None) -> SdeSystem:
    """``dX = -theta X dt + sigma dW``; stationary variance ``sigma^2 / (2 theta)``."""
    dim = int(dim)
    if domain is None:
        domain = ((-5.0, 5.0),) * dim

    def drift(s):
        return -theta * np.asarray(s, dtype=float)

    return SdeSystem("ou", dim, dim, drift, _constant_diagonal([sigma] * dim), _as_domain(domain),
                     {"theta": theta, "sigma": sigma, "dim": dim})


def _as_domain(domain):
    return tuple((float(lo), float(hi)) for lo, hi in domain)


_BUILTINS = {
    "double_well": double_well,
    "duffing": duffing,
    "fhn": fitzhugh_nagumo,
    "ou": ornstein_uhlenbeck,
}

SYSTEM_NAMES = tuple(_BUILTINS)


def builtin_system(name: str, params: Mapping | None = None) -> SdeSystem:
    """Look up a benchmark system by name; missing parameters take their defaults."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(_BUILTINS)}") from None
    try:
        return factory(**dict(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for system {name!r}: {exc}") from None
