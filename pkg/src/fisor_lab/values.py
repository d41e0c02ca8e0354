"""Offline critics: HJ feasible values, IQL reward values, and cost values.

Every family is a pair of Q networks with soft-updated targets plus one V
network fitted by expectile regression on the target pair.  The feasible
and cost families estimate a minimum over in-support actions (reversed
expectile, pessimistic max over the pair); the reward family estimates a
maximum (ordinary expectile, min over the pair).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, DatasetStats, compute_stats, normalize, sparse_h
from .env import EnvConfig, constraint_violation, cost_of, featurize
from .nn import MLP, AdamState, adam_step, backward_cached, forward, forward_cached, soft_update

OBS_DIM = 5
ACT_DIM = 2


class TrainingDivergence(FloatingPointError):
    def __init__(self, stage: str, step: int, detail: str):
        super().__init__(f"{stage} diverged at step {step}: {detail}")
        self.stage = stage
        self.step = step


def expectile_weight(u, tau: float, reverse: bool = False):
    if reverse:
        return np.abs(tau - (u > 0.0))
    return np.abs(tau - (u < 0.0))


def expectile_loss(u, tau: float):
    """L^tau(u) = |tau - 1(u < 0)| u^2; tau > 0.5 tracks an upper expectile."""
    u = np.asarray(u, dtype=np.float64)
    return expectile_weight(u, tau) * u * u


def reversed_expectile_loss(u, tau: float):
    """|tau - 1(u > 0)| u^2; tau > 0.5 tracks a lower expectile."""
    u = np.asarray(u, dtype=np.float64)
    return expectile_weight(u, tau, reverse=True) * u * u


def fit_scalar_expectile(samples, tau: float, reverse: bool = False, iters: int = 2000) -> float:
    """Minimise mean expectile loss of ``samples - v`` over a scalar ``v``.

    Plain gradient descent on the same loss gradient the critics use.  The
    loss is convex with curvature in ``[2 min(tau, 1-tau), 2 max(tau, 1-tau)]``
    so a step of ``1 / (2 max)`` converges linearly.
    """
    q = np.asarray(samples, dtype=np.float64)
    v = float(q.mean())
    lr = 1.0 / (2.0 * max(tau, 1.0 - tau))
    for _ in range(iters):
        u = q - v
        grad = float(np.mean(-2.0 * expectile_weight(u, tau, reverse) * u))
        v -= lr * grad
        if abs(grad) < 1e-14:
            break
    return v


@dataclass
class CriticConfig:
    tau: float = 0.9
    gamma: float = 0.99
    soft_update: float = 0.001
    hidden: tuple = (256, 256)
    batch_size: int = 256
    lr: float = 3e-4
    steps: int = 200_000
    log_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.5 < self.tau < 1.0:
            raise ValueError("tau must lie in (0.5, 1)")


class CriticSet:
    """Q pair with targets and a V network for one value family."""

    def __init__(self, cfg: CriticConfig, rng: np.random.Generator, pessimism: str):
        q_widths = (OBS_DIM + ACT_DIM, *cfg.hidden, 1)
        v_widths = (OBS_DIM, *cfg.hidden, 1)
        self.q = [MLP.init(q_widths, rng, cfg.dtype), MLP.init(q_widths, rng, cfg.dtype)]
        self.q_target = [q.copy() for q in self.q]
        self.v = MLP.init(v_widths, rng, cfg.dtype)
        self.q_opt = [AdamState.for_net(q, cfg.lr) for q in self.q]
        self.v_opt = AdamState.for_net(self.v, cfg.lr)
        self.pessimism = pessimism

    def reduce(self, q1, q2):
        return np.maximum(q1, q2) if self.pessimism == "max" else np.minimum(q1, q2)

    def q_value(self, sa, target: bool = False):
        nets = self.q_target if target else self.q
        return self.reduce(forward(nets[0], sa)[..., 0], forward(nets[1], sa)[..., 0])

    def q_pair(self, sa):
        return forward(self.q[0], sa)[..., 0], forward(self.q[1], sa)[..., 0]

    def v_value(self, s):
        return forward(self.v, s)[..., 0]

    def networks(self):
        return {"q1": self.q[0], "q2": self.q[1], "q1_target": self.q_target[0],
                "q2_target": self.q_target[1], "v": self.v}

    def optimizers(self):
        return {"q1": self.q_opt[0], "q2": self.q_opt[1], "v": self.v_opt}


FAMILY_PESSIMISM = {"h": "max", "c": "max", "r": "min"}


class CriticBank:
    """Feasible (``h``), reward (``r``) and optional cost (``c``) critics.

    The bank owns observation statistics and action scaling so callers pass
    raw environment states ``(x, y, v, theta)`` and raw actions.
    """

    def __init__(self, cfg: CriticConfig, stats: DatasetStats, action_bounds, seed: int = 0,
                 families=("h", "r")):
        self.cfg = cfg
        self.stats = stats
        self.action_bounds = np.asarray(action_bounds, dtype=np.float64)
        self.seed = seed
        self.sets: dict[str, CriticSet] = {}
        for i, fam in enumerate(("h", "r", "c")):
            if fam in families:
                rng = np.random.default_rng([seed, 100 + i])
                self.sets[fam] = CriticSet(cfg, rng, FAMILY_PESSIMISM[fam])
        # which family decides feasibility, and its threshold
        self.safety_family = "h"
        self.safety_threshold = 0.0

    # -- featurisation
    def obs(self, states):
        return normalize(featurize(states), self.stats)

    def act(self, actions):
        return np.asarray(actions, dtype=np.float64) / self.action_bounds

    def _sa(self, states, actions):
        return np.concatenate([self.obs(states), self.act(actions)], axis=-1)

    # -- raw-input accessors
    def q(self, family: str, states, actions):
        return self.sets[family].q_value(self._sa(states, actions))

    def v(self, family: str, states):
        return self.sets[family].v_value(self.obs(states))

    def q_h(self, states, actions):
        return self.q("h", states, actions)

    def v_h(self, states):
        return self.v("h", states)

    def q_safety(self, states, actions):
        return self.q(self.safety_family, states, actions)

    def v_safety(self, states):
        return self.v(self.safety_family, states)

    def feasible(self, states):
        return self.v_safety(states) <= self.safety_threshold

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for fam in sorted(self.sets):
            for name, net in sorted(self.sets[fam].networks().items()):
                h.update(f"{fam}.{name}".encode())
                h.update(net.params.astype("<f8").tobytes())
        return h.hexdigest()


def advantages(bank: CriticBank, states, actions):
    """``(A_r, A_h)`` with min-pair Q_r and max-pair Q_h."""
    sa = bank._sa(states, actions)
    s = bank.obs(states)
    out = []
    for fam in ("r", "h"):
        if fam in bank.sets:
            cs = bank.sets[fam]
            out.append(cs.q_value(sa) - cs.v_value(s))
        else:
            out.append(None)
    return tuple(out)


@dataclass
class TrainingData:
    """Precomputed network inputs for critic training."""
    obs: np.ndarray
    obs_next: np.ndarray
    sa: np.ndarray
    r: np.ndarray
    c: np.ndarray
    h: np.ndarray
    h_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


def scaled_h(h, M: float, floor: float | None = None):
    """``M * h`` inside hazards; geometric h, floored at ``-floor``, on safe states.

    Sign-preserving and pointwise >= h, so the discounted feasible region can
    only shrink (it is unchanged as gamma -> 1).  The scale keeps shallow
    violations from being washed out by discounting; the floor makes every
    state farther than ``floor`` from a hazard equally safe, so Q_h stops
    ranking actions by clearance deep inside the feasible region.
    """
    h = np.asarray(h, dtype=np.float64)
    safe = h if floor is None else np.maximum(h, -floor)
    return np.where(h > 0, M * h, safe)


def prepare_training_data(ds: Dataset, bank: CriticBank, h_mode: str = "scaled", M: float = 5.0,
                          env_cfg: EnvConfig | None = None, floor: float | None = None) -> TrainingData:
    """Network features plus the ``h`` labels used by the feasible backups.

    ``h_next`` is only consulted on goal-terminal rows; it is taken from the
    environment geometry (``env_cfg``) when available, otherwise assumed
    safe, and passed through the same relabelling as ``h``.  ``M`` is the
    violation value for ``"sparse"`` and the hazard multiplier for ``"scaled"``;
    ``floor`` only applies to ``"scaled"``.
    """
    if env_cfg is not None:
        h_next = constraint_violation(ds.s_next, env_cfg)
    else:
        h_next = np.full(len(ds), -1.0)
    if h_mode == "sparse":
        h = sparse_h(ds.c, M)
        h_next = sparse_h(cost_of(h_next), M)
    elif h_mode == "scaled":
        h = scaled_h(ds.h, M, floor)
        h_next = scaled_h(h_next, M, floor)
    elif h_mode == "geometric":
        h = ds.h
    else:
        raise ValueError(f"unknown h_mode {h_mode!r}")
    dt = bank.cfg.dtype
    return TrainingData(
        obs=bank.obs(ds.s).astype(dt), obs_next=bank.obs(ds.s_next).astype(dt),
        sa=bank._sa(ds.s, ds.a).astype(dt),
        r=ds.r.copy(), c=ds.c.copy(), h=np.asarray(h, dtype=np.float64),
        h_next=np.asarray(h_next, dtype=np.float64), done=ds.done.astype(bool),
    )


def _expectile_v_step(cs: CriticSet, s, sa, tau, reverse):
    q_t = cs.q_value(sa, target=True)
    v, acts = forward_cached(cs.v, s)
    u = q_t - v[:, 0]
    w = expectile_weight(u, tau, reverse)
    loss = float(np.mean(w * u * u))
    dv = (-2.0 * w * u / len(u))[:, None]
    adam_step(cs.v, backward_cached(cs.v, acts, dv), cs.v_opt)
    return loss


def _q_step(cs: CriticSet, sa, y):
    losses = []
    for net, opt in zip(cs.q, cs.q_opt):
        out, acts = forward_cached(net, sa)
        err = out[:, 0] - y
        losses.append(float(np.mean(err * err)))
        adam_step(net, backward_cached(net, acts, (2.0 * err / len(err))[:, None]), opt)
    return 0.5 * (losses[0] + losses[1])


def feasible_target(h, h_next, v_next, done, gamma):
    """(1-gamma) h(s) + gamma max(h(s), V(s')), with V(s') -> h(s') at goal arrival."""
    nxt = np.where(done, h_next, v_next)
    return (1.0 - gamma) * h + gamma * np.maximum(h, nxt)


def _train_family(bank: CriticBank, data: TrainingData, family: str, steps: int, seed: int,
                  stage: str, target_fn, reverse: bool, log=None):
    cfg = bank.cfg
    cs = bank.sets[family]
    rng = np.random.default_rng([seed, 200 + "hrc".index(family)])
    n = len(data)
    if n == 0:
        raise ValueError("empty training data")
    monitor = np.linspace(0, n - 1, min(n, 10_000)).astype(int)
    curve = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, cfg.batch_size)
        s, sa = data.obs[idx], data.sa[idx]
        try:
            loss_v = _expectile_v_step(cs, s, sa, cfg.tau, reverse)
            y = target_fn(data, idx, cs.v_value(data.obs_next[idx]))
            loss_q = _q_step(cs, sa, y)
        except FloatingPointError as exc:
            raise TrainingDivergence(stage, step, str(exc)) from exc
        if not (np.isfinite(loss_v) and np.isfinite(loss_q)):
            raise TrainingDivergence(stage, step, f"loss_v={loss_v} loss_q={loss_q}")
        for tgt, online in zip(cs.q_target, cs.q):
            soft_update(tgt, online, cfg.soft_update)
        if step % cfg.log_every == 0 or step == steps:
            row = {"step": step, "loss_v": loss_v, "loss_q": loss_q,
                   "mean_v": float(cs.v_value(data.obs[monitor]).mean())}
            curve.append(row)
            if log is not None:
                log(stage, row)
    return curve


def train_feasible_values(bank: CriticBank, data: TrainingData, steps: int, seed: int = 0, log=None):
    gamma = bank.cfg.gamma

    def target(d, idx, v_next):
        return feasible_target(d.h[idx], d.h_next[idx], v_next, d.done[idx], gamma)

    return _train_family(bank, data, "h", steps, seed, "feasible", target, reverse=True, log=log)


def train_reward_values(bank: CriticBank, data: TrainingData, steps: int, seed: int = 0, log=None):
    gamma = bank.cfg.gamma

    def target(d, idx, v_next):
        return d.r[idx] + gamma * np.where(d.done[idx], 0.0, v_next)

    return _train_family(bank, data, "r", steps, seed, "reward", target, reverse=False, log=log)


def train_cost_values(bank: CriticBank, data: TrainingData, steps: int, seed: int = 0, log=None):
    gamma = bank.cfg.gamma

    def target(d, idx, v_next):
        return d.c[idx] + gamma * np.where(d.done[idx], 0.0, v_next)

    return _train_family(bank, data, "c", steps, seed, "cost", target, reverse=True, log=log)


# --- tabular reference operators ------------------------------------------

def feasible_bellman_tabular(Q: np.ndarray, h: np.ndarray, next_state: np.ndarray, gamma: float):
    """One application of the feasible Bellman operator on a deterministic tabular MDP.

    ``Q`` and ``next_state`` have shape ``(n_states, n_actions)``.
    """
    v_next = Q.min(axis=1)[next_state]
    return (1.0 - gamma) * h[:, None] + gamma * np.maximum(h[:, None], v_next)


def feasible_value_iteration(h, next_state, gamma: float, Q0=None, tol: float = 1e-12,
                             max_iter: int = 100_000):
    """Iterate :func:`feasible_bellman_tabular` to a fixed point; returns ``(Q, n_iter)``."""
    h = np.asarray(h, dtype=np.float64)
    Q = np.zeros(next_state.shape) if Q0 is None else np.array(Q0, dtype=np.float64)
    for it in range(1, max_iter + 1):
        Q_new = feasible_bellman_tabular(Q, h, next_state, gamma)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new, it
        Q = Q_new
    return Q, max_iter


def cost_bellman_tabular(Q, c, next_state, gamma):
    return c[:, None] + gamma * Q.min(axis=1)[next_state]
