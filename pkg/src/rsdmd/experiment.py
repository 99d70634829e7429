"""Run orchestration: training loop, step log, exports and checkpoints.

A run directory holds::

    resolved_config.json   every setting the run used
    steps.jsonl            one record per environment step
    eigenvalues.csv        estimate snapshots at the export steps
    eigenfunctions_step<t>.csv
    reward_map.csv         per-cell visits, mean reward (and bandit Q)
    checkpoints/step_<t>/  agent/, dictionary/, env/, meta.json

All randomness derives from the configured seed, so a run is reproduced by
its resolved config alone.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from pathlib import Path

import numpy as np

from .agents import make_agent
from .config import ExperimentConfig, config_to_json, resolve_config
from .dictionary import TrainableDictionary, make_dictionary
from .env import ActionGrid, KoopmanEnv, RewardConfig, grid_points, step_rng
from .exceptions import ConfigError
from .neural import Mlp
from .sdmd import KoopmanEstimate, eigenfunction_values
from .systems import builtin_system

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RSDMD_OUTPUT_ROOT"
THREADS_ENV = "RSDMD_THREADS"
AGENT_STREAM = 50
EIGENVALUE_COLUMNS = ["step", "index", "re_mu", "im_mu", "re_lambda", "im_lambda"]


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def thread_limit() -> int | None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return n


def default_run_dir(cfg: ExperimentConfig) -> Path:
    if cfg.run.output_dir:
        return Path(cfg.run.output_dir)
    return output_root() / f"{cfg.system.name}_{cfg.agent.kind}_seed{cfg.run.seed}"


def build_environment(cfg: ExperimentConfig) -> KoopmanEnv:
    system = builtin_system(cfg.system.name, cfg.system.params)
    grid = ActionGrid(cfg.grid.k, cfg.grid.domain)
    dictionary = make_dictionary(cfg.dictionary.kind, **cfg.dictionary.params)
    r = cfg.reward
    reward = RewardConfig(r.r0, r.alpha_exp, r.eps_kde, r.bandwidth, r.n_modes, r.floor)
    d = cfg.dictionary
    return KoopmanEnv(system, grid, dictionary, dt=cfg.system.dt, n_steps=cfg.system.n_steps,
                      window=cfg.agent.window, reward=reward, generator=d.generator, ridge=d.ridge,
                      rank_tol=d.rank_tol, seed=cfg.run.seed, keep_archive=cfg.run.keep_archive,
                      dictionary_epochs=d.train_epochs, dictionary_batch=d.train_batch,
                      dictionary_gamma=d.gamma_reg, dictionary_lr=d.learning_rate)


def build_agent(cfg: ExperimentConfig, env: KoopmanEnv):
    a = cfg.agent
    return make_agent(a.kind, env.state_dim, env.n_actions, seed=cfg.run.seed, epsilon=a.epsilon,
                      q_init=a.q_init, params=a.params)


# exports ---------------------------------------------------------------

def export_eigenfunction_grid(est: KoopmanEstimate, dictionary, domain, resolution, modes=(0, 1), path=None):
    """Leading eigenfunctions on a uniform grid; rows ``x0, x1, ..., re_phi_i, im_phi_i, ...``.

    ``modes`` are positions in the estimate's leading-mode order.  Each column
    is normalised over the grid (largest modulus real and equal to 1).
    Returns ``(header, rows)`` and writes a CSV when ``path`` is given.
    """
    pts = grid_points(domain, resolution)
    lead = est.retained
    modes = [int(i) for i in modes if int(i) < lead.size]
    phi = eigenfunction_values(est, dictionary.transform(pts), lead[modes]) if modes else np.zeros((len(pts), 0))
    header = [f"x{j}" for j in range(pts.shape[1])]
    for i in modes:
        header += [f"re_phi_{i}", f"im_phi_{i}"]
    rows = np.empty((len(pts), pts.shape[1] + 2 * len(modes)))
    rows[:, : pts.shape[1]] = pts
    rows[:, pts.shape[1]::2] = phi.real
    rows[:, pts.shape[1] + 1::2] = phi.imag
    if path is not None:
        _write_csv(path, header, rows)
    return header, rows


def eigenvalue_rows(step, est: KoopmanEstimate | None):
    if est is None:
        return []
    out = []
    for i, idx in enumerate(est.retained):
        mu, lam = est.eigenvalues_mu[idx], est.eigenvalues_lambda[idx]
        out.append([step, i, mu.real, mu.imag, lam.real, lam.imag])
    return out


def _write_csv(path, header, rows, mode="w"):
    new = mode == "w" or not Path(path).exists()
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, np.integer, str)) else repr(float(v)) for v in row])


def write_reward_map(path, env: KoopmanEnv, agent, visits, reward_sums):
    grid = env.grid
    header = ["action"] + [f"cell{j}" for j in range(grid.dim)] + [f"center{j}" for j in range(grid.dim)]
    header += ["visits", "mean_reward", "q"]
    q = getattr(agent, "q", None)
    rows = []
    for a in range(grid.n_actions):
        mean = reward_sums[a] / visits[a] if visits[a] else float("nan")
        rows.append([a, *map(int, grid.cell_index(a)), *grid.cell_center(a), int(visits[a]), mean,
                     float(q[a]) if q is not None else float("nan")])
    _write_csv(path, header, rows)


def export_snapshot(run_dir, step, env: KoopmanEnv, cfg: ExperimentConfig, first=False):
    """Eigenvalues and eigenfunction grid of the estimate on all trajectories collected so far."""
    model = env.estimate_from_archive()
    est = model.estimate_ if model is not None else None
    path = Path(run_dir) / "eigenvalues.csv"
    _write_csv(path, EIGENVALUE_COLUMNS, eigenvalue_rows(step, est), mode="w" if first else "a")
    if est is not None:
        export_eigenfunction_grid(est, model.dictionary_, cfg.grid.domain, cfg.run.export_resolution,
                                  cfg.run.export_modes, Path(run_dir) / f"eigenfunctions_step{step}.csv")
    return model


# checkpoints -----------------------------------------------------------

def save_checkpoint(directory, step, cfg, env: KoopmanEnv, agent, visits, reward_sums):
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    agent.save(tmp / "agent")
    (tmp / "dictionary").mkdir(parents=True)
    dictionary = env.dictionary
    (tmp / "dictionary" / "params.json").write_text(json.dumps(
        {"kind": cfg.dictionary.kind, "params": cfg.dictionary.params}, indent=2))
    if isinstance(dictionary, TrainableDictionary) and hasattr(dictionary, "net_"):
        dictionary.net_.save(tmp / "dictionary" / "net.json")
    (tmp / "env").mkdir()
    np.savez(tmp / "env" / "state.npz", **env.get_state())
    meta = {"step": int(step), "agent_kind": cfg.agent.kind, "visits": [int(v) for v in visits],
            "reward_sums": [repr(float(v)) for v in reward_sums], "config": json.loads(config_to_json(cfg))}
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2))
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def latest_checkpoint(path) -> Path:
    """``path`` itself if it is a checkpoint, else the newest one under ``path/checkpoints``."""
    path = Path(path)
    if (path / "meta.json").exists():
        return path
    found = sorted((path / "checkpoints").glob("step_*[0-9]"))
    if not found:
        raise FileNotFoundError(f"no checkpoint under {path}")
    return found[-1]


def load_checkpoint(path, cfg: ExperimentConfig | None = None):
    """Rebuild ``(cfg, env, agent, step, visits, reward_sums)`` from a checkpoint directory."""
    path = latest_checkpoint(path)
    meta = json.loads((path / "meta.json").read_text())
    cfg = resolve_config(meta["config"] if cfg is None else cfg)
    env = build_environment(cfg)
    if (path / "dictionary" / "net.json").exists():
        env.dictionary.net_ = Mlp.load(path / "dictionary" / "net.json")
    with np.load(path / "env" / "state.npz") as f:
        env.set_state({k: f[k] for k in f.files})
    agent = build_agent(cfg, env)
    agent.load(path / "agent")
    visits = np.array(meta["visits"], dtype=np.int64)
    sums = np.array([float(v) for v in meta["reward_sums"]])
    return cfg, env, agent, int(meta["step"]), visits, sums


# main loop -------------------------------------------------------------

def _step_record(step, action, reward, info):
    rec = {"step": step, "action": int(action), "x_new": info["x_new"], "reward": reward.to_dict(),
           "eigenvalues_mu": info.get("eigenvalues_mu", []), "eigenvalues_lambda": info.get("eigenvalues_lambda", []),
           "wall_time": info.get("wall_time", 0.0)}
    return json.dumps(rec)


def _truncate_log(path, keep_steps):
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:keep_steps]))


def _truncate_eigenvalues(path, last_step):
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def run_experiment(config, run_dir=None, resume=None) -> Path:
    """Train the configured agent for ``run.t_max`` steps and write all artifacts to ``run_dir``."""
    limit = thread_limit()
    if limit is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return _run(config, run_dir, resume)
    return _run(config, run_dir, resume)


def _run(config, run_dir, resume):
    cfg = resolve_config(config)
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "steps.jsonl"
    export_steps = sorted(set(int(s) for s in cfg.run.export_steps))

    if resume is not None:
        ckpt = latest_checkpoint(resume)
        saved = json.loads((ckpt / "meta.json").read_text())["config"]
        if saved != json.loads(config_to_json(cfg)):
            raise ConfigError("checkpoint was written by a different configuration")
        cfg, env, agent, start, visits, reward_sums = load_checkpoint(ckpt, cfg)
        _truncate_log(log_path, start)
        _truncate_eigenvalues(run_dir / "eigenvalues.csv", start)
        logger.info("resuming %s from step %d", run_dir, start)
    else:
        env = build_environment(cfg)
        agent = build_agent(cfg, env)
        start = 0
        visits = np.zeros(env.n_actions, dtype=np.int64)
        reward_sums = np.zeros(env.n_actions)
        log_path.write_text("")
        (run_dir / "eigenvalues.csv").unlink(missing_ok=True)
        _write_csv(run_dir / "eigenvalues.csv", EIGENVALUE_COLUMNS, [])
    (run_dir / "resolved_config.json").write_text(config_to_json(cfg))

    state = env.window.copy()
    seed = cfg.run.seed
    with open(log_path, "a") as log:
        for t in range(start, cfg.run.t_max):
            rng = step_rng(seed, AGENT_STREAM, t)
            s = state.flat()
            action = agent.select(rng, s, t)
            reward, state, info = env.step(action)
            agent.observe(s, action, reward.total, state.flat(), rng)
            visits[action] += 1
            reward_sums[action] += reward.total
            log.write(_step_record(t, action, reward, info) + "\n")
            done = t + 1
            if done in export_steps:
                log.flush()
                export_snapshot(run_dir, done, env, cfg)
            if cfg.run.checkpoint_every and done % cfg.run.checkpoint_every == 0 and done < cfg.run.t_max:
                log.flush()
                save_checkpoint(run_dir / "checkpoints" / f"step_{done:06d}", done, cfg, env, agent, visits,
                                reward_sums)

    end = max(start, cfg.run.t_max)
    if end not in export_steps:
        export_snapshot(run_dir, end, env, cfg)
    write_reward_map(run_dir / "reward_map.csv", env, agent, visits, reward_sums)
    save_checkpoint(run_dir / "checkpoints" / f"step_{end:06d}", end, cfg, env, agent, visits, reward_sums)
    return run_dir


def reexport(checkpoint, what=("eigvals", "eigfuns", "rewardmap"), out_dir=None) -> Path:
    """Regenerate exports from a checkpoint into ``out_dir`` (default: the checkpoint directory)."""
    ckpt = latest_checkpoint(checkpoint)
    cfg, env, agent, step, visits, sums = load_checkpoint(ckpt)
    out = Path(out_dir) if out_dir is not None else ckpt
    out.mkdir(parents=True, exist_ok=True)
    model = env.estimate_from_archive() if {"eigvals", "eigfuns"} & set(what) else None
    est = model.estimate_ if model is not None else None
    if "eigvals" in what:
        _write_csv(out / "eigenvalues.csv", EIGENVALUE_COLUMNS, eigenvalue_rows(step, est))
    if "eigfuns" in what and est is not None:
        export_eigenfunction_grid(est, model.dictionary_, cfg.grid.domain, cfg.run.export_resolution,
                                  cfg.run.export_modes, out / f"eigenfunctions_step{step}.csv")
    if "rewardmap" in what:
        write_reward_map(out / "reward_map.csv", env, agent, visits, sums)
    return out


def read_step_log(path, drop=("wall_time",)) -> list[dict]:
    """Step records with the non-deterministic fields removed."""
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        for key in drop:
            rec.pop(key, None)
        out.append(rec)
    return out
