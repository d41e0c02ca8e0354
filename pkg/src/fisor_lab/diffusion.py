"""Weighted-regression diffusion policy.

Training a noise predictor with per-sample weights ``w(s, a)`` makes the
reverse process sample from ``pi_beta(a|s) * w(s, a)`` (normalised), so no
time-dependent guidance classifier is needed.  Actions live in the scaled
box ``[-1, 1]^d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import MLP, AdamState, adam_step, backward_cached, forward, forward_cached
from .values import TrainingDivergence


@dataclass
class DiffusionConfig:
    T: int = 5
    hidden: tuple = (256, 256, 256)
    emb_dim: int = 64
    batch_size: int = 2048
    lr: float = 3e-4
    steps: int = 200_000
    log_every: int = 1000
    clip_denoised: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")


@dataclass
class WeightConfig:
    alpha1: float = 3.0
    alpha2: float = 5.0
    clip_feasible: float = 100.0
    clip_infeasible: float = 150.0
    infeasible_branch: bool = True

    def __post_init__(self):
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ValueError("temperatures must be positive")
        if not (self.clip_feasible > 0 and self.clip_infeasible > 0):
            raise ValueError("clips must be positive")


class NoiseSchedule:
    """Discrete variance-preserving cosine schedule.

    Index ``t`` runs over ``0..T``; ``alpha[0] == 1`` and ``sigma[0] == 0``.
    """

    def __init__(self, T: int, offset: float = 0.008, max_beta: float = 0.999):
        self.T = int(T)
        grid = np.arange(self.T + 1) / self.T
        f = np.cos((grid + offset) / (1 + offset) * math.pi / 2) ** 2
        abar_raw = f / f[0]
        betas = np.clip(1.0 - abar_raw[1:] / abar_raw[:-1], 0.0, max_beta)
        self.betas = np.concatenate([[0.0], betas])
        self.alpha_bar = np.cumprod(1.0 - self.betas)
        self.alpha = np.sqrt(self.alpha_bar)
        self.sigma = np.sqrt(1.0 - self.alpha_bar)
        # q(a_{t-1} | a_t, a_0) coefficients, valid for t >= 1
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        denom = np.where(self.alpha_bar < 1.0, 1.0 - self.alpha_bar, 1.0)
        self.coef_x0 = np.sqrt(prev) * self.betas / denom
        self.coef_xt = np.sqrt(1.0 - self.betas) * (1.0 - prev) / denom
        self.post_var = self.betas * (1.0 - prev) / denom

    def to_dict(self):
        return {"T": self.T, "alpha": self.alpha.tolist(), "sigma": self.sigma.tolist()}


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class NoisePredictor:
    """z_theta(a_t, s, t) as an MLP on ``[a_t, s, emb(t)]``."""

    def __init__(self, act_dim: int, obs_dim: int, cfg: DiffusionConfig, rng: np.random.Generator):
        self.act_dim, self.obs_dim, self.emb_dim = act_dim, obs_dim, cfg.emb_dim
        self.net = MLP.init((act_dim + obs_dim + cfg.emb_dim, *cfg.hidden, act_dim), rng, cfg.dtype)
        self.n_calls = 0

    def inputs(self, a_t, obs, t):
        return np.concatenate([a_t, obs, timestep_embedding(t, self.emb_dim)], axis=-1)

    def __call__(self, a_t, obs, t):
        self.n_calls += 1
        return forward(self.net, self.inputs(a_t, obs, t))


class DiffusionPolicy:
    kind = "diffusion"

    def __init__(self, act_dim: int, obs_dim: int, cfg: DiffusionConfig, seed: int = 0):
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.T)
        self.predictor = NoisePredictor(act_dim, obs_dim, cfg, np.random.default_rng([seed, 300]))
        self.opt = AdamState.for_net(self.predictor.net, cfg.lr)
        self.skipped_batches = 0

    @property
    def net(self) -> MLP:
        return self.predictor.net

    def loss_and_grad(self, obs, actions, weights, t, z):
        sched = self.schedule
        a_t = sched.alpha[t][:, None] * actions + sched.sigma[t][:, None] * z
        pred, acts = forward_cached(self.net, self.predictor.inputs(a_t, obs, t))
        err = pred - z
        sq = np.sum(err * err, axis=-1)
        loss = float(np.mean(weights * sq))
        upstream = 2.0 * weights[:, None] * err / len(weights)
        return loss, backward_cached(self.net, acts, upstream)

    def sample(self, obs, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling; one predictor evaluation per diffusion step."""
        obs = np.atleast_2d(obs)
        sched = self.schedule
        a = rng.standard_normal((len(obs), self.predictor.act_dim))
        for t in range(sched.T, 0, -1):
            tt = np.full(len(obs), t)
            eps = self.predictor(a, obs, tt)
            x0 = (a - sched.sigma[t] * eps) / sched.alpha[t]
            if self.cfg.clip_denoised:
                x0 = np.clip(x0, -1.0, 1.0)
            a = sched.coef_x0[t] * x0 + sched.coef_xt[t] * a
            if t > 1:
                a = a + math.sqrt(sched.post_var[t]) * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)

    def header(self):
        return {"kind": self.kind, "schedule": self.schedule.to_dict(), "emb_dim": self.cfg.emb_dim,
                "clip_denoised": self.cfg.clip_denoised}


class GaussianPolicy:
    """Unit-variance Gaussian head; weighted log-likelihood is weighted MSE on the mean."""

    kind = "gaussian"

    def __init__(self, act_dim: int, obs_dim: int, cfg: DiffusionConfig, seed: int = 0):
        self.cfg = cfg
        self.net = MLP.init((obs_dim, *cfg.hidden, act_dim), np.random.default_rng([seed, 301]), cfg.dtype)
        self.opt = AdamState.for_net(self.net, cfg.lr)
        self.skipped_batches = 0

    def loss_and_grad(self, obs, actions, weights, t=None, z=None):
        mean, acts = forward_cached(self.net, obs)
        err = mean - actions
        loss = float(np.mean(weights * 0.5 * np.sum(err * err, axis=-1)))
        return loss, backward_cached(self.net, acts, weights[:, None] * err / len(weights))

    def sample(self, obs, rng=None) -> np.ndarray:
        # evaluation uses the mean action
        return np.clip(forward(self.net, np.atleast_2d(obs)), -1.0, 1.0)

    def header(self):
        return {"kind": self.kind}


# --- weights -------------------------------------------------------------

def _clipped_exp(x, clip):
    # exp(log(clip)) can round below clip, so saturated entries take clip exactly
    x = np.asarray(x, dtype=np.float64)
    cap = math.log(clip)
    return np.where(x >= cap, clip, np.exp(np.minimum(x, cap)))


def fisor_weight(bank, wcfg: WeightConfig, states, actions) -> np.ndarray:
    """Feasibility-dependent weight.

    Feasible states (V <= threshold): ``min(exp(alpha1 A_r), clip) * 1[Q <= threshold]``.
    Infeasible states: ``min(exp(-alpha2 A_safety), clip)``, or 0 when the
    infeasible branch is disabled.
    """
    fam, thr = bank.safety_family, bank.safety_threshold
    sa = bank._sa(states, actions)
    obs = bank.obs(states)
    safety = bank.sets[fam]
    q_s, v_s = safety.q_value(sa), safety.v_value(obs)
    reward = bank.sets["r"]
    a_r = reward.q_value(sa) - reward.v_value(obs)
    w_feas = _clipped_exp(wcfg.alpha1 * a_r, wcfg.clip_feasible) * (q_s <= thr)
    if wcfg.infeasible_branch:
        w_inf = _clipped_exp(-wcfg.alpha2 * (q_s - v_s), wcfg.clip_infeasible)
    else:
        w_inf = np.zeros_like(q_s)
    return np.where(v_s <= thr, w_feas, w_inf)


def il_weight(bank, wcfg: WeightConfig, states, actions) -> np.ndarray:
    """Reward-free variant: indicator on feasible states, same infeasible branch."""
    fam, thr = bank.safety_family, bank.safety_threshold
    safety = bank.sets[fam]
    q_s = safety.q_value(bank._sa(states, actions))
    v_s = safety.v_value(bank.obs(states))
    w_feas = (q_s <= thr).astype(np.float64)
    if wcfg.infeasible_branch:
        w_inf = _clipped_exp(-wcfg.alpha2 * (q_s - v_s), wcfg.clip_infeasible)
    else:
        w_inf = np.zeros_like(q_s)
    return np.where(v_s <= thr, w_feas, w_inf)


def train_policy(policy, obs, actions, weights, steps: int, seed: int = 0, log=None):
    """Weighted regression on precomputed per-sample weights.

    ``obs`` are network-ready observations, ``actions`` scaled to [-1, 1].
    Batches whose weights are all zero are skipped and counted.
    """
    obs = np.asarray(obs, dtype=policy.net.dtype)
    actions = np.asarray(actions, dtype=policy.net.dtype)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(obs)
    rng = np.random.default_rng([seed, 400])
    cfg = policy.cfg
    T = getattr(policy, "schedule", None)
    curve = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, cfg.batch_size)
        w = weights[idx]
        t = rng.integers(1, T.T + 1, cfg.batch_size) if T is not None else None
        z = rng.standard_normal((cfg.batch_size, actions.shape[1])) if T is not None else None
        if not np.any(w > 0):
            policy.skipped_batches += 1
            continue
        loss, grad = policy.loss_and_grad(obs[idx], actions[idx], w, t, z)
        if not np.isfinite(loss):
            raise TrainingDivergence("policy", step, f"loss={loss}")
        try:
            adam_step(policy.net, grad, policy.opt)
        except FloatingPointError as exc:
            raise TrainingDivergence("policy", step, str(exc)) from exc
        if step % cfg.log_every == 0 or step == steps:
            row = {"step": step, "loss": loss, "skipped": policy.skipped_batches}
            curve.append(row)
            if log is not None:
                log("policy", row)
    return curve
