"""Sampling environment: actions pick grid cells, rewards score the SDMD fit.

Each step samples a starting point inside the chosen cell, integrates one
trajectory, pools it with the trajectories of the last ``window`` starting
points, fits SDMD on the pool and rewards

    R = R_0 - L + alpha_exp / (eta(x_new) + eps_kde)

with ``L`` the spectral consistency of the leading modes and ``eta`` a
Gaussian KDE over all earlier starting points.
"""
from __future__ import annotations

import itertools
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .dictionary import TrainableDictionary
from .exceptions import ActionOutOfRange, IntegrationDiverged, InvalidInput
from .sdmd import SDMD, KoopmanEstimate, train_dictionary
from .systems import SdeSystem, SnapshotData, simulate_trajectory

logger = logging.getLogger(__name__)

# sub-stream tags for per-step random generators
_POINT_STREAM = 0
_TRAJ_STREAM = 1
_INIT_STREAM = 2


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream, step)``; no state to carry between steps."""
    return np.random.default_rng([int(seed), int(stream), int(step)])


def step_seed(seed: int, stream: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stream), int(step)]).generate_state(1)[0])


class ActionGrid:
    """``k`` cells per axis over a box; action ``a`` enumerates cells in C order (last axis fastest)."""

    def __init__(self, k: int, domain):
        self.k = int(k)
        if self.k < 1:
            raise InvalidInput("grid needs at least one cell per axis")
        self.domain = tuple((float(lo), float(hi)) for lo, hi in domain)
        self.lower = np.array([lo for lo, _ in self.domain])
        self.upper = np.array([hi for _, hi in self.domain])
        if np.any(self.upper <= self.lower):
            raise InvalidInput("domain bounds must be increasing")
        self.widths = (self.upper - self.lower) / self.k

    @property
    def dim(self) -> int:
        return len(self.domain)

    @property
    def n_actions(self) -> int:
        return self.k**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.k,) * self.dim

    def _check(self, action):
        if not 0 <= int(action) < self.n_actions:
            raise ActionOutOfRange(f"action {action} outside [0, {self.n_actions})")
        return int(action)

    def cell_index(self, action) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(self._check(action), self.shape))

    def action_of(self, index) -> int:
        return int(np.ravel_multi_index(tuple(int(i) for i in index), self.shape))

    def cell_bounds(self, action) -> np.ndarray:
        """``(d, 2)`` array of ``[low, high)`` per axis."""
        idx = np.array(self.cell_index(action))
        lo = self.lower + idx * self.widths
        return np.stack([lo, lo + self.widths], axis=1)

    def cell_center(self, action) -> np.ndarray:
        return self.cell_bounds(action).mean(axis=1)

    def action_at(self, point) -> int:
        """Cell containing ``point`` (half-open cells, upper edge clamped into the last cell)."""
        p = np.asarray(point, dtype=float)
        idx = np.floor((p - self.lower) / self.widths).astype(int)
        idx = np.clip(idx, 0, self.k - 1)
        return self.action_of(idx)

    def centers(self) -> np.ndarray:
        return np.array([self.cell_center(a) for a in range(self.n_actions)])

    def sample(self, action, rng) -> np.ndarray:
        bounds = self.cell_bounds(action)
        return rng.uniform(bounds[:, 0], bounds[:, 1])


def sample_initial_point(grid: ActionGrid, action: int, rng) -> np.ndarray:
    return grid.sample(action, rng)


class StateWindow:
    """FIFO of the last ``length`` starting points; ``flat()`` has fixed size ``dim * length``."""

    def __init__(self, length: int, dim: int, points=()):
        self.length = int(length)
        self.dim = int(dim)
        self.points = deque(maxlen=max(self.length, 0) or None)
        for p in points:
            self.push(p)

    def push(self, point):
        if self.length == 0:
            return
        self.points.append(np.asarray(point, dtype=float).reshape(self.dim).copy())

    def __len__(self):
        return len(self.points)

    def flat(self) -> np.ndarray:
        out = np.zeros(self.dim * self.length)
        if self.points:
            arr = np.concatenate(list(self.points))
            out[out.size - arr.size:] = arr
        return out

    def copy(self) -> "StateWindow":
        return StateWindow(self.length, self.dim, list(self.points))

    def as_array(self) -> np.ndarray:
        return np.array(list(self.points)).reshape(-1, self.dim)


def kde_density(history, query, bandwidth: float) -> float:
    """Normalised Gaussian KDE of ``history`` at ``query``; 0 for an empty history."""
    if not bandwidth > 0:
        raise InvalidInput("bandwidth must be positive")
    q = np.asarray(query, dtype=float).ravel()
    pts = np.asarray(history, dtype=float).reshape(-1, q.size) if len(history) else np.empty((0, q.size))
    if pts.shape[0] == 0:
        return 0.0
    d = q.size
    sq = np.sum((pts - q) ** 2, axis=1)
    norm = (2.0 * np.pi * bandwidth**2) ** (d / 2.0)
    return float(np.mean(np.exp(-0.5 * sq / bandwidth**2)) / norm)


@dataclass
class RewardConfig:
    r0: float = 1.0
    alpha_exp: float = 0.15
    eps_kde: float = 1e-2
    bandwidth: float | None = None
    n_modes: int = 5
    floor: float = -10.0


@dataclass
class RewardBreakdown:
    r0: float
    consistency: float
    density: float
    bonus: float
    total: float
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def compute_reward(consistency: float, density: float, cfg: RewardConfig) -> RewardBreakdown:
    bonus = cfg.alpha_exp / (density + cfg.eps_kde)
    return RewardBreakdown(cfg.r0, float(consistency), float(density), float(bonus),
                           float(cfg.r0 - consistency + bonus))


def default_bandwidth(grid: ActionGrid) -> float:
    """Half a cell: domain diagonal over ``2k``."""
    return float(np.linalg.norm(grid.upper - grid.lower) / (2 * grid.k))


class KoopmanEnv:
    """Stateful environment driving SDMD with agent-chosen starting cells.

    ``window`` is the state length; 0 gives the stateless bandit setting in
    which each reward uses only the new trajectory.  ``reset`` fills the
    window with uniformly drawn starting points.  Trajectories are cached by
    starting point and seed, and all randomness derives from ``(seed, step)``
    so a restored environment continues identically.
    """

    def __init__(self, system: SdeSystem, grid: ActionGrid, dictionary, dt=0.01, n_steps=1000, window=5,
                 reward: RewardConfig | None = None, generator="analytic", ridge=None, rank_tol=1e-6, seed=0,
                 keep_archive=True, dictionary_epochs=0, dictionary_batch=256, dictionary_gamma=0.0,
                 dictionary_lr=1e-3):
        if grid.dim != system.dim:
            raise InvalidInput("grid and system dimensions differ")
        self.system = system
        self.grid = grid
        self.dictionary = dictionary
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.window_length = int(window)
        self.reward_cfg = reward or RewardConfig()
        self.bandwidth = self.reward_cfg.bandwidth or default_bandwidth(grid)
        self.generator = generator
        self.ridge = ridge
        self.rank_tol = rank_tol
        self.seed = int(seed)
        self.keep_archive = keep_archive
        self.dictionary_epochs = int(dictionary_epochs)
        self.dictionary_batch = int(dictionary_batch)
        self.dictionary_gamma = float(dictionary_gamma)
        self.dictionary_lr = float(dictionary_lr)
        if not hasattr(self.dictionary, "n_features_in_"):
            self.dictionary.fit(np.zeros((1, system.dim)))
        self.reset()

    @property
    def state_dim(self) -> int:
        return self.system.dim * self.window_length

    @property
    def n_actions(self) -> int:
        return self.grid.n_actions

    def reset(self) -> StateWindow:
        self.t = 0
        self.history: list[np.ndarray] = []
        self.window = StateWindow(self.window_length, self.system.dim)
        self._entries: deque = deque()
        self.archive: list[SnapshotData] = []
        self.archive_starts: list[np.ndarray] = []
        self.last_estimate: KoopmanEstimate | None = None
        rng = step_rng(self.seed, _INIT_STREAM, 0)
        for i in range(self.window_length):
            x0 = rng.uniform(self.grid.lower, self.grid.upper)
            seed = step_seed(self.seed, _INIT_STREAM, i + 1)
            self._admit(x0, seed)
        return self.window.copy()

    def _simulate(self, x0, seed):
        return simulate_trajectory(self.system, x0, self.n_steps, self.dt, seed)

    def _admit(self, x0, seed, data=None):
        """Record a starting point in the history and the window; cache its trajectory."""
        self.history.append(np.asarray(x0, dtype=float))
        if data is None:
            try:
                data = self._simulate(x0, seed)
            except IntegrationDiverged:
                data = None
        if self.window_length > 0:
            self._entries.append((np.asarray(x0, dtype=float), seed, data))
            while len(self._entries) > self.window_length:
                self._entries.popleft()
            self.window.push(x0)
        if data is not None and self.keep_archive:
            self.archive.append(data)
            self.archive_starts.append(np.asarray(x0, dtype=float))

    def _fit(self, data: SnapshotData):
        if isinstance(self.dictionary, TrainableDictionary) and self.dictionary_epochs > 0:
            train_dictionary(data, self.dictionary, gamma_reg=self.dictionary_gamma, epochs=self.dictionary_epochs,
                             batch=self.dictionary_batch, learning_rate=self.dictionary_lr, ridge=self.ridge,
                             seed=step_seed(self.seed, _TRAJ_STREAM + 10, self.t))
        model = SDMD(self.dictionary, system=self.system, dt=self.dt, generator=self.generator,
                     ridge=self.ridge, n_modes=self.reward_cfg.n_modes, rank_tol=self.rank_tol)
        return model.fit(data.x, data.y)

    def step(self, action):
        """Advance one step; returns ``(RewardBreakdown, next StateWindow, info)``."""
        start = time.perf_counter()
        action = self.grid._check(action)
        step = self.t
        x_new = self.grid.sample(action, step_rng(self.seed, _POINT_STREAM, step))
        seed = step_seed(self.seed, _TRAJ_STREAM, step)
        density = kde_density(self.history, x_new, self.bandwidth)
        cfg = self.reward_cfg
        info = {"step": step, "action": action, "x_new": x_new.tolist()}
        try:
            new_data = self._simulate(x_new, seed)
        except IntegrationDiverged as exc:
            logger.warning("trajectory from %s diverged at step %s", x_new, exc.step)
            new_data = None
        if new_data is None:
            reward = compute_reward(0.0, density, cfg)
            reward = RewardBreakdown(cfg.r0, cfg.r0 + reward.bonus - cfg.floor, density, reward.bonus,
                                     cfg.floor, diverged=True)
            info["eigenvalues_mu"] = []
            info["eigenvalues_lambda"] = []
        else:
            parts = [d for _, _, d in self._entries if d is not None] + [new_data]
            pooled = SnapshotData.concatenate(parts)
            model = self._fit(pooled)
            est = model.estimate_
            self.last_estimate = est
            report = model.spectral_consistency(pooled.x, pooled.y)
            reward = compute_reward(report.total, density, cfg)
            lead = est.leading(cfg.n_modes)
            info["eigenvalues_mu"] = [[float(v.real), float(v.imag)] for v in est.eigenvalues_mu[lead]]
            info["eigenvalues_lambda"] = [[float(v.real), float(v.imag)] for v in est.eigenvalues_lambda[lead]]
        self._admit(x_new, seed, new_data)
        self.t += 1
        info["wall_time"] = time.perf_counter() - start
        return reward, self.window.copy(), info

    def archive_data(self) -> SnapshotData | None:
        return SnapshotData.concatenate(self.archive) if self.archive else None

    def estimate_from_archive(self, max_trajectories=None) -> SDMD | None:
        """SDMD on every trajectory collected so far (optionally only the most recent ones)."""
        parts = self.archive if max_trajectories is None else self.archive[-int(max_trajectories):]
        if not parts:
            return None
        pooled = SnapshotData.concatenate(parts)
        model = SDMD(self.dictionary, system=self.system, dt=self.dt, generator=self.generator,
                     ridge=self.ridge, n_modes=self.reward_cfg.n_modes, rank_tol=self.rank_tol)
        return model.fit(pooled.x, pooled.y)

    # checkpoint support
    def get_state(self) -> dict:
        return {
            "t": self.t,
            "history": np.array(self.history).reshape(-1, self.system.dim),
            "window_points": np.array([e[0] for e in self._entries]).reshape(-1, self.system.dim),
            "window_seeds": np.array([e[1] for e in self._entries], dtype=np.uint64),
            # archived trajectories are stored as (start, seed) and re-simulated on restore
            "archive_starts": np.array(self.archive_starts).reshape(-1, self.system.dim),
            "archive_seeds": np.array([d.seed for d in self.archive], dtype=np.uint64),
        }

    def set_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.history = [np.array(p) for p in state["history"]]
        self.archive_starts = [np.array(p) for p in state["archive_starts"]]
        self.archive = [self._simulate(p, int(s)) for p, s in zip(self.archive_starts, state["archive_seeds"])]
        self.window = StateWindow(self.window_length, self.system.dim)
        self._entries = deque()
        for p, s in zip(state["window_points"], state["window_seeds"]):
            try:
                data = self._simulate(p, int(s))
            except IntegrationDiverged:
                data = None
            self._entries.append((np.array(p), int(s), data))
            self.window.push(p)


class CellRewardEnv:
    """Synthetic environment with a fixed reward per cell, for agent smoke tests.

    Same interface as :class:`KoopmanEnv` (state window of past starting
    points, ``step`` returning a reward breakdown) but no dynamics: the
    reward of a cell is ``cell_rewards[action]`` plus optional Gaussian noise.
    """

    def __init__(self, grid: ActionGrid, cell_rewards, window=1, noise=0.0, seed=0):
        self.grid = grid
        self.cell_rewards = np.asarray(cell_rewards, dtype=float)
        if self.cell_rewards.shape != (grid.n_actions,):
            raise InvalidInput(f"need one reward per cell ({grid.n_actions})")
        self.window_length = int(window)
        self.noise = float(noise)
        self.seed = int(seed)
        self.reset()

    @property
    def state_dim(self) -> int:
        return self.grid.dim * self.window_length

    @property
    def n_actions(self) -> int:
        return self.grid.n_actions

    @property
    def optimal_action(self) -> int:
        return int(np.argmax(self.cell_rewards))

    def reset(self) -> StateWindow:
        self.t = 0
        self.window = StateWindow(self.window_length, self.grid.dim)
        rng = step_rng(self.seed, _INIT_STREAM, 0)
        for _ in range(self.window_length):
            self.window.push(rng.uniform(self.grid.lower, self.grid.upper))
        return self.window.copy()

    def step(self, action):
        action = self.grid._check(action)
        rng = step_rng(self.seed, _POINT_STREAM, self.t)
        x_new = self.grid.sample(action, rng)
        value = float(self.cell_rewards[action] + self.noise * rng.standard_normal())
        info = {"step": self.t, "action": action, "x_new": x_new.tolist()}
        self.window.push(x_new)
        self.t += 1
        return RewardBreakdown(value, 0.0, 0.0, 0.0, value), self.window.copy(), info

    def get_state(self) -> dict:
        return {"t": self.t, "window_points": self.window.as_array()}

    def set_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.window = StateWindow(self.window_length, self.grid.dim, list(state["window_points"]))


def grid_points(domain, resolution) -> np.ndarray:
    """Uniform evaluation grid including the domain corners, last axis fastest."""
    if isinstance(resolution, int):
        resolution = [resolution] * len(domain)
    if min(resolution) < 2:
        raise InvalidInput("resolution must be at least 2 per axis")
    axes = [np.linspace(lo, hi, int(r)) for (lo, hi), r in zip(domain, resolution)]
    return np.array(list(itertools.product(*axes)))
