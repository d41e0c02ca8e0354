"""Three-stage training, candidate-filtered action selection, evaluation and region dumps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as D
from .config import RunConfig
from .diffusion import DiffusionPolicy, GaussianPolicy, fisor_weight, il_weight, train_policy
from .env import (
    EnvConfig,
    constraint_violation,
    goal_distance,
    oracle_feasible_batch,
    sample_start_states,
    step_batch,
)
from .nn import load_checkpoint, save_checkpoint
from .values import (
    OBS_DIM,
    ACT_DIM,
    CriticBank,
    prepare_training_data,
    train_cost_values,
    train_feasible_values,
    train_reward_values,
)

log = logging.getLogger(__name__)

COST_REGION_THRESHOLD = 1e-3
CURVE_COLUMNS = ("step", "loss_Vh", "loss_Qh", "loss_Vr", "loss_Qr", "mean_Vh")


class StageError(RuntimeError):
    """Stage contract violated (e.g. critics mutated during policy training)."""


@dataclass
class Artifacts:
    cfg: RunConfig
    bank: CriticBank
    policy: object
    stats: D.DatasetStats
    curves: list = field(default_factory=list)
    policy_curve: list = field(default_factory=list)
    out_dir: Path | None = None


def load_or_generate_dataset(cfg: RunConfig, out_dir: Path | None = None) -> D.Dataset:
    if cfg.data.path:
        return D.load(cfg.data.path, cfg.env)
    ds = D.generate(cfg.env, cfg.data.n_scripted, cfg.data.n_random, cfg.data.seed, cfg.data.noise_scale)
    if out_dir is not None:
        D.save(ds, Path(out_dir) / "dataset.bin")
    return ds


def run_dataset(run_dir, cfg: RunConfig) -> D.Dataset:
    """The dataset a run was trained on: its saved copy, the configured path, or a regeneration."""
    saved = Path(run_dir) / "dataset.bin"
    if cfg.data.path is None and saved.exists():
        return D.load(saved, cfg.env)
    return load_or_generate_dataset(cfg)


def _families(variant: str):
    return {"no_hj": ("c", "r"), "il_mode": ("h",)}.get(variant, ("h", "r"))


def _stage_logger(stage, row):
    log.info("%s %s", stage, row)


def train_critics(cfg: RunConfig, ds: D.Dataset, curve_log=None):
    """Stages one and two: safety critics, then reward critics.  Returns ``(bank, stats, curves)``."""
    stats = D.compute_stats(ds) if cfg.data.normalize_obs else D.DatasetStats.identity(OBS_DIM)
    bank = CriticBank(cfg.critic, stats, cfg.env.action_bounds, seed=cfg.seed,
                      families=_families(cfg.variant))
    data = prepare_training_data(ds, bank, cfg.data.h_mode, cfg.data.label_scale, cfg.env,
                                 cfg.data.h_floor)
    logger = curve_log or _stage_logger
    curves = []
    if cfg.variant == "no_hj":
        bank.safety_family, bank.safety_threshold = "c", COST_REGION_THRESHOLD
        rows = train_cost_values(bank, data, cfg.critic.steps, cfg.seed, logger)
        curves += [{"step": r["step"], "loss_Vc": r["loss_v"], "loss_Qc": r["loss_q"],
                    "mean_Vc": r["mean_v"]} for r in rows]
    else:
        rows = train_feasible_values(bank, data, cfg.critic.steps, cfg.seed, logger)
        curves += [{"step": r["step"], "loss_Vh": r["loss_v"], "loss_Qh": r["loss_q"],
                    "mean_Vh": r["mean_v"]} for r in rows]
    if "r" in bank.sets:
        steps = cfg.reward_steps if cfg.reward_steps is not None else cfg.critic.steps
        rows = train_reward_values(bank, data, steps, cfg.seed, logger)
        curves += [{"step": r["step"], "loss_Vr": r["loss_v"], "loss_Qr": r["loss_q"]} for r in rows]
    return bank, stats, curves


def policy_weights(cfg: RunConfig, bank: CriticBank, ds: D.Dataset) -> np.ndarray:
    wcfg = cfg.weights
    if cfg.variant == "no_infeasible":
        from dataclasses import replace
        wcfg = replace(wcfg, infeasible_branch=False)
    fn = il_weight if cfg.variant == "il_mode" else fisor_weight
    out = np.empty(len(ds))
    for lo in range(0, len(ds), 20_000):
        sl = slice(lo, lo + 20_000)
        out[sl] = fn(bank, wcfg, ds.s[sl], ds.a[sl])
    return out


def train_policy_stage(cfg: RunConfig, bank: CriticBank, ds: D.Dataset, curve_log=None):
    """Stage three on frozen critics; returns ``(policy, curve, weights)``."""
    before = bank.checksum()
    weights = policy_weights(cfg, bank, ds)
    cls = GaussianPolicy if cfg.variant == "no_diffusion" else DiffusionPolicy
    policy = cls(ACT_DIM, OBS_DIM, cfg.diffusion, seed=cfg.seed)
    curve = train_policy(policy, bank.obs(ds.s), bank.act(ds.a), weights, cfg.diffusion.steps,
                         cfg.seed, curve_log or _stage_logger)
    if bank.checksum() != before:
        raise StageError("critic parameters changed during policy training")
    return policy, curve, weights


def train_full(cfg: RunConfig, out_dir=None, ds: D.Dataset | None = None) -> Artifacts:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    if ds is None:
        ds = load_or_generate_dataset(cfg, out)
    bank, stats, curves = train_critics(cfg, ds)
    policy, policy_curve, _ = train_policy_stage(cfg, bank, ds)
    art = Artifacts(cfg, bank, policy, stats, curves, policy_curve, out)
    if out is not None:
        save_artifacts(art, out)
    return art


# --- persistence -------------------------------------------------------------

def save_artifacts(art: Artifacts, out: Path) -> None:
    out = Path(out)
    (out / "critics").mkdir(parents=True, exist_ok=True)
    seed = art.cfg.seed
    for fam, cs in art.bank.sets.items():
        opts = cs.optimizers()
        for name, net in cs.networks().items():
            save_checkpoint(out / "critics" / f"{fam}_{name}.ckpt", net, step=_opt_step(opts.get(name)),
                            seed=seed, opt=opts.get(name))
    save_checkpoint(out / "policy.ckpt", art.policy.net, step=art.policy.opt.step, seed=seed,
                    opt=art.policy.opt, extra=art.policy.header())
    meta = {"stats": art.stats.to_dict(), "safety_family": art.bank.safety_family,
            "safety_threshold": art.bank.safety_threshold, "families": sorted(art.bank.sets)}
    (out / "critics" / "bank.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_csv(out / "curves.csv", art.curves, _curve_columns(art.curves))
    write_csv(out / "policy_curve.csv", art.policy_curve, ("step", "loss", "skipped"))


def _opt_step(opt):
    return opt.step if opt is not None else 0


def _curve_columns(rows):
    cols = list(CURVE_COLUMNS)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def load_artifacts(out_dir) -> Artifacts:
    out = Path(out_dir)
    cfg = RunConfig.load(out / "config.json")
    meta = json.loads((out / "critics" / "bank.json").read_text())
    stats = D.DatasetStats.from_dict(meta["stats"])
    bank = CriticBank(cfg.critic, stats, cfg.env.action_bounds, seed=cfg.seed, families=meta["families"])
    bank.safety_family, bank.safety_threshold = meta["safety_family"], meta["safety_threshold"]
    for fam, cs in bank.sets.items():
        for name, net in cs.networks().items():
            loaded, _, _ = load_checkpoint(out / "critics" / f"{fam}_{name}.ckpt")
            net.load_params(loaded.params)
    pnet, header, popt = load_checkpoint(out / "policy.ckpt")
    cls = GaussianPolicy if header["extra"].get("kind") == "gaussian" else DiffusionPolicy
    policy = cls(ACT_DIM, OBS_DIM, cfg.diffusion, seed=cfg.seed)
    policy.net.load_params(pnet.params)
    if popt is not None:
        policy.opt = popt
    return Artifacts(cfg, bank, policy, stats, out_dir=out)


# --- acting and evaluation ---------------------------------------------------

def select_action(policy, bank: CriticBank, states, n_candidates: int, rng: np.random.Generator):
    """Draw ``n_candidates`` policy samples per state and keep the one with the lowest safety Q.

    Ties go to the lowest candidate index.  Returns raw environment actions.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = len(states)
    rep = np.repeat(states, n_candidates, axis=0)
    cand = policy.sample(bank.obs(rep), rng) * bank.action_bounds
    if n_candidates == 1:
        return cand
    q = bank.q_safety(rep, cand).reshape(n, n_candidates)
    pick = np.argmin(q, axis=1)
    return cand.reshape(n, n_candidates, -1)[np.arange(n), pick]


def sample_eval_starts(cfg: EnvConfig, n: int, feasible: bool, rng: np.random.Generator) -> np.ndarray:
    """Uniform start states restricted to oracle-feasible (or oracle-infeasible) ones."""
    out = np.empty((0, 4))
    while len(out) < n:
        cand = sample_start_states(rng, 4 * n, cfg)
        keep = oracle_feasible_batch(cand, cfg) == feasible
        out = np.concatenate([out, cand[keep]])
    return out[:n]


def rollout(act_fn, starts, cfg: EnvConfig, record: bool = False):
    """Run episodes in lockstep until goal arrival or the step limit."""
    s = np.array(starts, dtype=np.float64)
    n = len(s)
    alive = np.ones(n, dtype=bool)
    R, C = np.zeros(n), np.zeros(n)
    viol = np.zeros(n, dtype=int)
    reached = np.zeros(n, dtype=bool)
    traj = [s.copy()] if record else None
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = act_fn(s[idx])
        nxt, r, c, h, rc = step_batch(s[idx], a, cfg)
        R[idx] += r
        C[idx] += c
        viol[idx] += h > 0
        s[idx] = nxt
        reached[idx] = rc
        alive[idx[rc]] = False
        if record:
            traj.append(s.copy())
    return {"reward": R, "cost": C, "violations": viol, "reached": reached,
            "trajectory": np.stack(traj) if record else None}


@dataclass
class EvalReport:
    reward_returns: np.ndarray
    cost_returns: np.ndarray
    violation_steps: np.ndarray
    reached_goal: np.ndarray
    start_feasible: np.ndarray
    r_min: float
    r_max: float
    cost_limit: float
    eps: float
    behavior_infeasible_violations: float | None = None

    def _norm_reward(self, mask):
        span = self.r_max - self.r_min
        return float(np.mean((self.reward_returns[mask] - self.r_min) / span)) if mask.any() else float("nan")

    def _norm_cost(self, mask):
        if not mask.any():
            return float("nan")
        return float(np.mean((self.cost_returns[mask] + self.eps) / (self.cost_limit + self.eps)))

    def _summary(self, mask):
        return {
            "episodes": int(mask.sum()),
            "normalized_reward": self._norm_reward(mask),
            "normalized_cost": self._norm_cost(mask),
            "goal_rate": float(self.reached_goal[mask].mean()) if mask.any() else float("nan"),
            "mean_violation_steps": float(self.violation_steps[mask].mean()) if mask.any() else float("nan"),
        }

    @property
    def normalized_reward(self):
        return self._norm_reward(self.start_feasible)

    @property
    def normalized_cost(self):
        return self._norm_cost(self.start_feasible)

    @property
    def goal_rate(self):
        return self._summary(self.start_feasible)["goal_rate"]

    def breakdown(self) -> dict:
        return {"feasible_start": self._summary(self.start_feasible),
                "infeasible_start": self._summary(~self.start_feasible)}

    def to_dict(self) -> dict:
        return {
            "normalized_reward": self.normalized_reward,
            "normalized_cost": self.normalized_cost,
            "goal_rate": self.goal_rate,
            "breakdown": self.breakdown(),
            "r_min": self.r_min, "r_max": self.r_max,
            "cost_limit": self.cost_limit, "eps": self.eps,
            "behavior_infeasible_violations": self.behavior_infeasible_violations,
            "episodes": {
                "reward_returns": self.reward_returns.tolist(),
                "cost_returns": self.cost_returns.tolist(),
                "violation_steps": self.violation_steps.tolist(),
                "reached_goal": self.reached_goal.tolist(),
                "start_feasible": self.start_feasible.tolist(),
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def normalized_cost(cost_return, cost_limit, eps):
    return (cost_return + eps) / (cost_limit + eps)


def normalized_reward(reward_return, r_min, r_max):
    return (reward_return - r_min) / (r_max - r_min)


def behavior_infeasible_violations(ds: D.Dataset, cfg: EnvConfig) -> float:
    """Mean violation-step count over dataset episodes that start oracle-infeasible."""
    bounds = D.episode_bounds(ds)
    starts = np.array([ds.s[a] for a, _ in bounds])
    infeasible = ~oracle_feasible_batch(starts, cfg)
    counts = [int(np.sum(constraint_violation(ds.s_next[a:b], cfg) > 0))
              for (a, b), bad in zip(bounds, infeasible) if bad]
    return float(np.mean(counts)) if counts else float("nan")


def evaluate(policy, bank: CriticBank, cfg: RunConfig, ds: D.Dataset | None = None,
             episodes: int | None = None, n_candidates: int | None = None,
             include_infeasible: bool | None = None) -> EvalReport:
    ev = cfg.eval
    episodes = episodes or ev.episodes
    n_candidates = n_candidates or ev.n_candidates
    include_infeasible = ev.include_infeasible if include_infeasible is None else include_infeasible
    rng_starts = np.random.default_rng([ev.seed, 500])
    rng_act = np.random.default_rng([ev.seed, cfg.seed, 501])
    starts = [sample_eval_starts(cfg.env, episodes, True, rng_starts)]
    flags = [np.ones(episodes, dtype=bool)]
    if include_infeasible:
        starts.append(sample_eval_starts(cfg.env, episodes, False, rng_starts))
        flags.append(np.zeros(episodes, dtype=bool))
    starts = np.concatenate(starts)
    res = rollout(lambda s: select_action(policy, bank, s, n_candidates, rng_act), starts, cfg.env)
    if ds is not None:
        returns = D.trajectory_returns(ds)
        r_min, r_max = float(returns.min()), float(returns.max())
        behavior = behavior_infeasible_violations(ds, cfg.env)
    else:
        r_min, r_max, behavior = 0.0, 1.0, None
    return EvalReport(res["reward"], res["cost"], res["violations"], res["reached"],
                      np.concatenate(flags), r_min, r_max, ev.cost_limit, ev.eps, behavior)


# --- feasible-region dumps ---------------------------------------------------

def region_grid(cfg: EnvConfig, resolution: int = 100, speed: float = 1.0, heading="goal"):
    """Cell-centre states on an (x, y) grid at a fixed speed/heading slice.

    ``heading`` is either ``"goal"`` (each cell faces the goal) or an angle.
    """
    w = cfg.arena_half_width
    xs = (np.arange(resolution) + 0.5) / resolution * 2 * w - w
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    if heading == "goal":
        gx, gy = cfg.goal_center
        TH = np.arctan2(gy - Y, gx - X)
    else:
        TH = np.full_like(X, float(heading))
    return np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(speed)), TH.ravel()], axis=1), xs


def region_metrics(pred_feasible, oracle) -> dict:
    pred_feasible = np.asarray(pred_feasible, dtype=bool)
    oracle = np.asarray(oracle, dtype=bool)
    union = np.sum(pred_feasible | oracle)
    iou = float(np.sum(pred_feasible & oracle) / union) if union else 1.0
    n_inf = np.sum(~oracle)
    ff = float(np.sum(pred_feasible & ~oracle) / n_inf) if n_inf else 0.0
    return {"iou": iou, "false_feasible_rate": ff, "oracle_infeasible_cells": int(n_inf),
            "predicted_infeasible_cells": int(np.sum(~pred_feasible))}


def dump_region(bank: CriticBank, cfg: EnvConfig, out_prefix, resolution: int = 100,
                speed: float = 1.0, heading="goal", render: bool = True) -> dict:
    """Write ``<prefix>.csv`` (and ``<prefix>.svg``) with learned values and oracle labels."""
    states, xs = region_grid(cfg, resolution, speed, heading)
    oracle = oracle_feasible_batch(states, cfg)
    cols = {"x": states[:, 0], "y": states[:, 1]}
    metrics = {}
    if "h" in bank.sets:
        cols["V_h"] = bank.v("h", states)
        metrics["V_h"] = region_metrics(cols["V_h"] <= 0.0, oracle)
    if "c" in bank.sets:
        cols["V_c"] = bank.v("c", states)
        metrics["V_c"] = region_metrics(cols["V_c"] <= COST_REGION_THRESHOLD, oracle)
    cols["oracle"] = oracle.astype(int)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    names = list(cols)
    with open(prefix.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(cols[k] for k in names)):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])
    if render:
        from .plotting import region_figure
        region_figure(cols, xs, cfg, prefix.with_suffix(".svg"))
    (prefix.parent / (prefix.name + "_metrics.json")).write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics
