"""Regret of epsilon-greedy arm selection with noisy reward estimates.

Arm ``a`` has true mean ``R_a``; the greedy step sees ``R_a + u`` with ``u``
uniform on ``[-eps_sdmd, eps_sdmd]`` drawn afresh for every arm at every
step.  Exploration happens with probability ``eps_t = min(1, c / (N t))``.
When ``eps_sdmd < gap_min / 2`` the noisy argmax is always right and regret
comes only from exploration, which grows like ``log T``.  Otherwise the
greedy step errs with fixed probability and regret is linear.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .exceptions import DegenerateArms, InvalidInput

MIN_HORIZON = 1000


def validate_assumption_gap(true_means, eps_sdmd):
    """Check ``eps_sdmd < gap_min / 2``; returns ``(holds, report)``."""
    means = np.asarray(true_means, dtype=float).ravel()
    if means.size < 2:
        raise InvalidInput("need at least two arms")
    best = means.max()
    gaps = best - means
    sub = gaps[gaps > 0]
    if sub.size == 0:
        raise DegenerateArms("all arms have the same mean; the suboptimality gap is undefined")
    gap_min = float(sub.min())
    holds = bool(eps_sdmd < gap_min / 2.0)
    return holds, {"gap_min": gap_min, "half_gap": gap_min / 2.0, "eps_sdmd": float(eps_sdmd), "holds": holds}


@dataclass
class RegretExperiment:
    true_means: tuple
    estimator_noise: float
    horizon: int = 100_000
    c: float | None = None

    def __post_init__(self):
        self.true_means = tuple(float(m) for m in self.true_means)
        if len(self.true_means) < 2:
            raise InvalidInput("need at least two arms")
        if self.estimator_noise < 0:
            raise InvalidInput("estimator_noise must be non-negative")
        if self.horizon < MIN_HORIZON:
            raise InvalidInput(f"horizon must be at least {MIN_HORIZON}")
        validate_assumption_gap(self.true_means, self.estimator_noise)

    @property
    def n_arms(self) -> int:
        return len(self.true_means)

    @property
    def schedule_constant(self) -> float:
        return float(self.n_arms if self.c is None else self.c)

    def epsilon(self, t) -> np.ndarray:
        """Exploration rate at steps ``t >= 1``."""
        t = np.asarray(t, dtype=float)
        return np.minimum(1.0, self.schedule_constant / (self.n_arms * t))


@dataclass
class RegretResult:
    steps: np.ndarray
    instant: np.ndarray
    cumulative: np.ndarray
    explored: np.ndarray
    summary: dict


def simulate_regret(spec: RegretExperiment, seed) -> RegretResult:
    """One run of ``spec.horizon`` pulls; regret is measured with the true gaps."""
    rng = np.random.default_rng(seed)
    means = np.asarray(spec.true_means)
    gaps = means.max() - means
    T, n = spec.horizon, spec.n_arms
    t = np.arange(1, T + 1)
    explored = rng.random(T) < spec.epsilon(t)
    random_arm = rng.integers(n, size=T)
    noise = rng.uniform(-spec.estimator_noise, spec.estimator_noise, size=(T, n))
    greedy = np.argmax(means + noise, axis=1)
    arms = np.where(explored, random_arm, greedy)
    instant = gaps[arms]
    cumulative = np.cumsum(instant)
    return RegretResult(t, instant, cumulative, explored, summarize(spec, t, instant, cumulative))


def _fit(x, y):
    res = stats.linregress(x, y)
    return {"slope": float(res.slope), "intercept": float(res.intercept), "r2": float(res.rvalue**2)}


def summarize(spec: RegretExperiment, t, instant, cumulative) -> dict:
    """Log-T and linear fits of the regret curve plus per-tenth regret rates."""
    T = t.size
    tenth = max(T // 10, 1)
    first = float(instant[:tenth].mean())
    last = float(instant[-tenth:].mean())
    half = slice(T // 2, None)
    holds, gap = validate_assumption_gap(spec.true_means, spec.estimator_noise)
    return {
        "horizon": int(T),
        "final_regret": float(cumulative[-1]),
        "assumption": gap,
        "first_tenth_rate": first,
        "last_tenth_rate": last,
        "rate_ratio": last / first if first > 0 else float("nan"),
        "log_fit": _fit(np.log(t), cumulative),
        "linear_fit": _fit(t, cumulative),
        "last_half_linear_fit": _fit(t[half], cumulative[half]),
        "growth": "logarithmic" if holds else "linear",
    }


def run_regret_experiment(spec: RegretExperiment, seed, out_dir=None, record_every=1) -> RegretResult:
    """Simulate and optionally write ``regret.csv`` and ``regret_summary.json`` to ``out_dir``."""
    result = simulate_regret(spec, seed)
    result.summary["seed"] = int(seed) if np.ndim(seed) == 0 else list(seed)
    result.summary["experiment"] = asdict(spec)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keep = slice(record_every - 1, None, record_every)
        with open(out / "regret.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "explored", "instant_regret", "cumulative_regret"])
            for row in zip(result.steps[keep], result.explored[keep].astype(int),
                           result.instant[keep], result.cumulative[keep]):
                writer.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3]))])
        (out / "regret_summary.json").write_text(json.dumps(result.summary, indent=2))
    return result


def final_window_slopes(spec: RegretExperiment, seeds, window=0.5) -> np.ndarray:
    """Slope of a linear fit to cumulative regret over the last ``window`` fraction, per seed."""
    out = []
    for s in seeds:
        res = simulate_regret(spec, s)
        start = int(spec.horizon * (1.0 - window))
        out.append(_fit(res.steps[start:], res.cumulative[start:])["slope"])
    return np.array(out)


def regret_dichotomy(holds: RegretExperiment, violated: RegretExperiment, seeds=range(10)) -> dict:
    """Welch test between the final-window regret slopes of the two regimes."""
    a = final_window_slopes(holds, seeds)
    b = final_window_slopes(violated, seeds)
    test = stats.ttest_ind(a, b, equal_var=False)
    return {"holds_slopes": a.tolist(), "violated_slopes": b.tolist(),
            "statistic": float(test.statistic), "p_value": float(test.pvalue)}
