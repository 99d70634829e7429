"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the bandit
criteria (3 and 4) share one 10-seed run of about four minutes.
"""
import copy
import json
import time
from pathlib import Path

import numpy as np
import pytest

from rsdmd.agents import (BanditAgent, DqnAgent, DqnConfig, PpoAgent, PpoConfig, ReplayBuffer, gae,
                          ppo_objective)
from rsdmd.cli import gradcheck_report
from rsdmd.dictionary import HermiteDictionary, MonomialDictionary
from rsdmd.env import ActionGrid, CellRewardEnv, grid_points, step_rng
from rsdmd.experiment import load_checkpoint, read_step_log, run_experiment
from rsdmd.neural import Mlp, huber_loss, soft_update
from rsdmd.regret import RegretExperiment, regret_dichotomy, simulate_regret
from rsdmd.sdmd import SDMD, edmd_operator, eigenfunction_values
from rsdmd.systems import builtin_system, simulate_trajectory

CONFIGS = Path(__file__).parent.parent / "configs"
SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail} ({elapsed:.1f}s)")
        return ok
    return emit


def test_criterion_1_ou_spectrum(report):
    start = time.perf_counter()
    ou = builtin_system("ou", {"theta": 1.0, "sigma": np.sqrt(2.0)})
    data = simulate_trajectory(ou, [0.0], 100_000, 0.01, seed=0)
    model = SDMD(HermiteDictionary(degree=2), system=ou, dt=0.01, generator="analytic").fit(data.x)
    lam = np.sort(model.generator_eigenvalues_.real)[::-1]
    err1 = abs(lam[1] + 1.0)
    err2 = abs(lam[2] + 2.0) / 2.0
    elapsed = time.perf_counter() - start
    ok = abs(lam[0]) < 0.05 and err1 < 0.1 and err2 < 0.1 and elapsed < 30
    assert report(1, "OU spectral oracle", ok, f"lambda={np.round(lam, 4).tolist()} rel.err=({err1:.3f}, {err2:.3f})",
                  elapsed)


def test_criterion_2_edmd_equivalence(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(20, 101))
        dim, degree = [(1, 3), (1, 5), (2, 1), (2, 2), (3, 1)][seed % 5]
        d = MonomialDictionary(degree=degree).fit(np.zeros((1, dim)))
        x = rng.uniform(-1, 1, size=(m, dim))
        y = x + 0.1 * rng.normal(size=(m, dim))
        # exact equivalence needs the unregularised solve
        model = SDMD(d, dt=0.01, generator="finite_diff", ridge=0.0).fit(x, y)
        assert d.size <= 8
        k_edmd = edmd_operator(d.transform(x), d.transform(y))
        worst = max(worst, float(np.max(np.abs(model.koopman_matrix_ - k_edmd))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 5
    assert report(2, "EDMD equivalence", ok, f"max error {worst:.2e} over 20 instances", elapsed)


@pytest.fixture(scope="module")
def bandit_runs(tmp_path_factory):
    base = json.loads((CONFIGS / "double_well_bandit_scaled.json").read_text())
    out = []
    start = time.perf_counter()
    for seed in SEEDS:
        cfg = copy.deepcopy(base)
        cfg["run"].update(seed=seed, checkpoint_every=0, export_steps=[800])
        run_dir = run_experiment(cfg, tmp_path_factory.mktemp(f"bandit{seed}"))
        _, env, agent, step, _, _ = load_checkpoint(run_dir)
        assert step == 800
        out.append((env, agent, env.estimate_from_archive()))
    return out, time.perf_counter() - start


def test_criterion_3_double_well_metastability(bandit_runs, report):
    runs, elapsed = bandit_runs
    passed = []
    details = []
    grid11 = grid_points([(-3.0, 3.0), (-4.0, 4.0)], 11)
    wells = np.array([[-1.0, 0.0], [1.0, 0.0]])
    for env, _, model in runs:
        est = model.estimate_
        lead = est.retained[:2]
        phi1 = eigenfunction_values(est, model.dictionary_.transform(grid11), lead[:1])[:, 0]
        const = float(np.std(phi1) / np.mean(np.abs(phi1)))
        phi2 = eigenfunction_values(est, model.dictionary_.transform(np.vstack([grid11, wells])), lead[1:2])[-2:, 0]
        opposite = bool(phi2[0].real * phi2[1].real < 0)
        passed.append(const < 0.05 and opposite)
        details.append(f"{const:.1e}/{'+-' if opposite else '=='}")
    ok = sum(passed) >= 8 and elapsed < 20 * 60
    assert report(3, "double-well metastability", ok, f"{sum(passed)}/10 seeds (std ratio/sign: {details})",
                  elapsed)


def test_criterion_4_reward_map_concentration(bandit_runs, report):
    runs, elapsed = bandit_runs
    passed = []
    margins = []
    for env, agent, _ in runs:
        wells = [env.grid.action_at([-1.0, 0.0]), env.grid.action_at([1.0, 0.0])]
        well_q = float(np.mean(agent.q[wells]))
        margins.append(round(well_q - float(np.mean(agent.q)), 3))
        passed.append(well_q > float(np.mean(agent.q)))
    ok = sum(passed) >= 8
    assert report(4, "reward-map concentration", ok, f"{sum(passed)}/10 seeds (well minus mean Q: {margins})",
                  elapsed)


def test_criterion_5_regret_dichotomy(report):
    start = time.perf_counter()
    holds = RegretExperiment((1.0, 0.5), 0.1, horizon=100_000)
    violated = RegretExperiment((1.0, 0.9), 0.2, horizon=100_000)
    ratios = [simulate_regret(holds, s).summary["rate_ratio"] for s in SEEDS]
    fits = [simulate_regret(violated, s).summary["last_half_linear_fit"] for s in SEEDS]
    welch = regret_dichotomy(holds, violated, SEEDS)
    elapsed = time.perf_counter() - start
    sub = all(r < 0.2 for r in ratios)
    lin = all(f["slope"] > 0 and f["r2"] > 0.99 for f in fits)
    ok = sub and lin and elapsed < 60
    detail = (f"max decade ratio {max(ratios):.3f}, min R2 {min(f['r2'] for f in fits):.5f}, "
              f"min slope {min(f['slope'] for f in fits):.4f}, Welch p={welch['p_value']:.1e}")
    assert report(5, "regret dichotomy", ok, detail, elapsed)


def test_criterion_6_gradient_integrity(report):
    start = time.perf_counter()
    rep = gradcheck_report(seeds=10, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = rep["passed"] and elapsed < 60
    assert report(6, "gradient integrity", ok, f"max rel error {rep['max_rel_error']:.2e} "
                  f"(3 MLPs, 3 dictionaries, 10 seeds)", elapsed)


def test_criterion_7_micro_contracts(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    checks = {}

    agent = BanditAgent(3)
    seen = {a: [] for a in range(3)}
    for _ in range(500):
        a, r = int(rng.integers(3)), float(rng.normal(0, 100))
        agent.update(a, r)
        seen[a].append(r)
    checks["bandit mean"] = all(abs(agent.q[a] - np.mean(v)) <= 1e-12 * max(1, abs(np.mean(v)))
                                for a, v in seen.items())

    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(1, 51))
        g, lam = rng.uniform(0, 1, 2)
        r, v = rng.normal(size=t), rng.normal(size=t + 1)
        delta = r + g * v[1:] - v[:-1]
        direct = [sum((g * lam) ** l * delta[s + l] for l in range(t - s)) for s in range(t)]
        worst = max(worst, float(np.max(np.abs(gae(r, v, g, lam) - direct))))
    checks["GAE dual form"] = worst < 1e-12

    adv = rng.uniform(0.1, 5, 50)
    _, g_up = ppo_objective(np.zeros(50), np.log(1.2) + rng.uniform(0.01, 2, 50), adv, 0.2)
    _, g_down = ppo_objective(np.zeros(50), np.log(0.8) - rng.uniform(0.01, 2, 50), -adv, 0.2)
    checks["PPO clip"] = not np.any(g_up) and not np.any(g_down)

    checks["Huber"] = (huber_loss([0.5], [0.0], 1.0)[0] == 0.125 and huber_loss([2.0], [0.0], 1.0)[0] == 1.5)

    target, source = Mlp([3, 5, 2], rng=1), Mlp([3, 5, 2], rng=2)
    expected = [0.05 * s + 0.95 * t for t, s in zip(target.params, source.params)]
    soft_update(target, source, 0.05)
    checks["soft update"] = all(np.array_equal(a, b) for a, b in zip(target.params, expected))

    buf = ReplayBuffer(5, 1)
    for i in range(12):
        buf.push([i], i, 0.0, [i])
    checks["replay FIFO"] = buf.contents().actions.tolist() == [7, 8, 9, 10, 11]

    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 30
    assert report(7, "micro-contracts", ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()),
                  elapsed)


def smoke_run(agent, seed, steps=2000):
    env = CellRewardEnv(ActionGrid(2, [(0, 1), (0, 1)]), [0.0, 0.3, 1.0, 0.5], window=1, noise=0.1, seed=seed)
    state = env.reset().flat()
    actions = []
    for t in range(steps):
        rng = step_rng(seed, 100, t)
        a = agent.select(rng, state, t)
        reward, window, _ = env.step(a)
        agent.observe(state, a, reward.total, window.flat(), rng)
        state = window.flat()
        actions.append(a)
    return float(np.mean(np.array(actions[-100:]) == env.optimal_action))


# hyperparameters for the short 2000-step horizon, see the README
SMOKE_DQN = DqnConfig(epsilon_decay=300)
SMOKE_PPO = PpoConfig(learning_rate=1e-3, critic_learning_rate=1e-3, normalize_advantages=True, gamma=0.9)


@pytest.mark.parametrize("kind", ["dqn", "ppo"])
def test_criterion_8_smoke_convergence(kind, report):
    start = time.perf_counter()
    rates = []
    for seed in SEEDS:
        agent = DqnAgent(2, 4, SMOKE_DQN, seed=seed) if kind == "dqn" else PpoAgent(2, 4, SMOKE_PPO, seed=seed)
        rates.append(smoke_run(agent, seed))
    elapsed = time.perf_counter() - start
    good = sum(r >= 0.9 for r in rates)
    ok = good >= 8 and elapsed < 300
    assert report(8, f"{kind.upper()} smoke convergence", ok, f"{good}/10 seeds >= 90% optimal (rates {rates})",
                  elapsed)


def test_criterion_9_determinism_round_trip(tmp_path, report):
    start = time.perf_counter()
    results = {}
    for kind in ("bandit", "dqn", "ppo"):
        cfg = {"system": {"name": "double_well", "n_steps": 100}, "grid": {"k": 4},
               "dictionary": {"params": {"n_centers_per_axis": 4}}, "agent": {"kind": kind},
               "run": {"t_max": 20, "seed": 3, "checkpoint_every": 10, "export_steps": [10, 20],
                       "export_resolution": 5}}
        if kind != "bandit":
            cfg["agent"]["params"] = {"hidden": [16, 16], "batch_size": 8}
            if kind == "dqn":
                cfg["agent"]["params"]["learning_starts"] = 8
            else:
                cfg["agent"]["params"]["minibatch_size"] = 4
        a = run_experiment(cfg, tmp_path / f"{kind}_a")
        b = run_experiment(cfg, tmp_path / f"{kind}_b")
        same = read_step_log(a / "steps.jsonl") == read_step_log(b / "steps.jsonl")
        c = run_experiment(cfg, tmp_path / f"{kind}_c")
        run_experiment(cfg, c, resume=c / "checkpoints" / "step_000010")
        resumed = read_step_log(c / "steps.jsonl") == read_step_log(a / "steps.jsonl")
        results[kind] = same and resumed
    elapsed = time.perf_counter() - start
    ok = all(results.values()) and elapsed < 120
    assert report(9, "determinism and checkpoint round-trip", ok, str(results), elapsed)
