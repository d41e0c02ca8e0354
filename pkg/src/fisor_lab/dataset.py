"""Offline transition datasets: generation, sparse relabelling, persistence, statistics.

Observations are stored as raw states ``(x, y, v, theta)``; ``c`` and ``h``
describe the state ``s`` the transition starts from.  ``done`` marks goal
arrival only, so time-limit truncation is bootstrapped through.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import (
    EnvConfig,
    constraint_violation,
    cost_of,
    featurize,
    random_action_batch,
    sample_start_states,
    scripted_action_batch,
    step_batch,
)

FORMAT_VERSION = 1
MAGIC = b"FSRD"
STATE_DIM = 4
ACTION_DIM = 2
FIELDS = (
    ("s", STATE_DIM), ("a", ACTION_DIM), ("s_next", STATE_DIM),
    ("r", 1), ("c", 1), ("h", 1), ("done", 1),
)
ROW_WIDTH = sum(w for _, w in FIELDS)
STD_FLOOR = 1e-6


class DatasetError(Exception):
    """Base class for dataset problems."""


class DatasetConfigError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetHashMismatch(DatasetError):
    pass


class HashMismatchWarning(UserWarning):
    pass


@dataclass
class Dataset:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    c: np.ndarray
    h: np.ndarray
    done: np.ndarray
    env_hash: str = ""

    def __len__(self):
        return len(self.r)

    def rows(self) -> np.ndarray:
        return np.column_stack([
            self.s, self.a, self.s_next, self.r, self.c, self.h, self.done.astype(np.float64),
        ]).astype("<f8")

    @classmethod
    def from_rows(cls, rows: np.ndarray, env_hash: str = "") -> "Dataset":
        cols, i = {}, 0
        for name, width in FIELDS:
            block = np.ascontiguousarray(rows[:, i:i + width], dtype=np.float64)
            cols[name] = block if width > 1 else block[:, 0].copy()
            i += width
        cols["done"] = cols["done"] != 0.0
        return cls(**cols, env_hash=env_hash)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.s[idx], self.a[idx], self.s_next[idx], self.r[idx],
                       self.c[idx], self.h[idx], self.done[idx], self.env_hash)


def concatenate(parts) -> Dataset:
    parts = list(parts)
    return Dataset(*(np.concatenate([getattr(p, f) for p in parts]) for f, _ in FIELDS),
                   env_hash=parts[0].env_hash if parts else "")


def _rollout_chunk(starts, actions_fn, cfg: EnvConfig):
    """Run episodes in lockstep; ``actions_fn(states, t)`` gives per-episode actions."""
    n = len(starts)
    s = starts.copy()
    alive = np.ones(n, dtype=bool)
    per_episode = [[] for _ in range(n)]
    for t in range(cfg.max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = actions_fn(s[idx], idx, t)
        nxt, r, _, _, reached = step_batch(s[idx], a, cfg)
        h = constraint_violation(s[idx], cfg)
        for j, k in enumerate(idx):
            per_episode[k].append((s[k].copy(), a[j], nxt[j], r[j], cost_of(h[j]), h[j], reached[j]))
        s[idx] = nxt
        alive[idx[reached]] = False
    return per_episode


def _episodes_to_dataset(episodes, limit: int, env_hash: str) -> Dataset:
    rows = [tr for ep in episodes for tr in ep][:limit]
    if not rows:
        return Dataset(np.zeros((0, STATE_DIM)), np.zeros((0, ACTION_DIM)), np.zeros((0, STATE_DIM)),
                       np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, bool), env_hash)
    s, a, s2, r, c, h, d = zip(*rows)
    return Dataset(np.array(s), np.array(a), np.array(s2), np.array(r, dtype=np.float64),
                   np.array(c, dtype=np.float64), np.array(h, dtype=np.float64),
                   np.array(d, dtype=bool), env_hash)


def _collect(cfg, n_transitions, seed, stream, policy, noise_scale, chunk=128):
    """Collect ``n_transitions`` with one RNG substream per episode index."""
    episodes, total, ep = [], 0, 0
    while total < n_transitions:
        rngs = [np.random.default_rng([seed, stream, ep + k]) for k in range(chunk)]
        starts = np.array([sample_start_states(g, 1, cfg)[0] for g in rngs])
        if policy == "scripted":
            noise = np.array([g.standard_normal((cfg.max_steps, ACTION_DIM)) for g in rngs])
            fn = lambda s, idx, t: scripted_action_batch(  # noqa: E731
                s, cfg, noise[idx, t] if noise_scale > 0 else None, noise_scale)
        else:
            acts = np.array([random_action_batch(g, cfg.max_steps, cfg) for g in rngs])
            fn = lambda s, idx, t: acts[idx, t]  # noqa: E731
        new = _rollout_chunk(starts, fn, cfg)
        episodes.extend(new)
        total += sum(len(e) for e in new)
        ep += chunk
    return _episodes_to_dataset(episodes, n_transitions, cfg.digest())


def generate(cfg: EnvConfig, n_scripted: int, n_random: int, seed: int = 0,
             noise_scale: float = 0.3) -> Dataset:
    """Scripted-collector transitions followed by uniform-random-policy transitions."""
    if n_scripted < 0 or n_random < 0:
        raise DatasetConfigError("transition counts must be non-negative")
    if n_scripted + n_random == 0:
        raise DatasetConfigError("dataset would be empty")
    parts = []
    if n_scripted:
        parts.append(_collect(cfg, n_scripted, seed, 0, "scripted", noise_scale))
    if n_random:
        parts.append(_collect(cfg, n_random, seed, 1, "random", 0.0))
    return concatenate(parts)


def relabel_sparse_h(ds: Dataset, M: float = 25.0) -> Dataset:
    """Replace ``h`` by -1 on safe states and ``M`` on states with positive cost."""
    if not M > 0:
        raise ValueError("M must be positive")
    out = ds.subset(slice(None))
    out.h = sparse_h(ds.c, M)
    return out


def sparse_h(c, M: float):
    return np.where(np.asarray(c) > 0, float(M), -1.0)


def episode_bounds(ds: Dataset) -> list[tuple[int, int]]:
    """Half-open index ranges of the episodes stored back to back in ``ds``.

    An episode ends at a goal arrival or wherever the next row does not
    continue from this row's successor state.
    """
    n = len(ds)
    if n == 0:
        return []
    breaks = ds.done[:-1] | np.any(ds.s_next[:-1] != ds.s[1:], axis=1)
    ends = np.flatnonzero(breaks) + 1
    edges = np.concatenate([[0], ends, [n]])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def trajectory_returns(ds: Dataset) -> np.ndarray:
    return np.array([ds.r[a:b].sum() for a, b in episode_bounds(ds)])


# --- persistence -------------------------------------------------------------

def _header(ds: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "fields": [[name, width] for name, width in FIELDS],
        "dtype": "<f8",
        "env_hash": ds.env_hash,
        "count": len(ds),
    }


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(ds)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(ds.rows().tobytes())
    manifest_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def load(path, cfg: EnvConfig | None = None, strict_hash: bool = False) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetVersionError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: version {header.get('version')} != {FORMAT_VERSION}")
    if [tuple(f) for f in header["fields"]] != list(FIELDS):
        raise DatasetVersionError(f"{path}: unexpected field layout {header['fields']}")
    count = header["count"]
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("version") != FORMAT_VERSION:
            raise DatasetVersionError(f"{mpath}: version mismatch")
        if manifest.get("count") != count:
            raise DatasetTruncatedError(f"manifest count {manifest.get('count')} != header count {count}")
    body = raw[8 + hlen:]
    if len(body) != count * ROW_WIDTH * 8:
        raise DatasetTruncatedError(
            f"{path}: expected {count} rows, found {len(body) / (ROW_WIDTH * 8):.2f}")
    rows = np.frombuffer(body, dtype="<f8").reshape(count, ROW_WIDTH)
    ds = Dataset.from_rows(rows, header["env_hash"])
    if cfg is not None and header["env_hash"] != cfg.digest():
        msg = f"{path}: dataset env hash {header['env_hash']} != config hash {cfg.digest()}"
        if strict_hash:
            raise DatasetHashMismatch(msg)
        warnings.warn(msg, HashMismatchWarning, stacklevel=2)
    return ds


# --- normalisation -----------------------------------------------------------

@dataclass(frozen=True)
class DatasetStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    count: int

    def to_dict(self):
        return {"obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["obs_mean"], dtype=np.float64),
                   np.asarray(d["obs_std"], dtype=np.float64), int(d["count"]))

    @classmethod
    def identity(cls, dim: int):
        return cls(np.zeros(dim), np.ones(dim), 0)


def compute_stats(obs) -> DatasetStats:
    """Per-dimension mean and population std of observations.

    Accepts either a :class:`Dataset` (its featurized ``s``) or a raw
    ``(n, d)`` observation array.
    """
    if isinstance(obs, Dataset):
        obs = featurize(obs.s)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or len(obs) == 0:
        raise DatasetError("cannot compute statistics of an empty dataset")
    return DatasetStats(obs.mean(axis=0), np.maximum(obs.std(axis=0), STD_FLOOR), len(obs))


def normalize(obs, stats: DatasetStats) -> np.ndarray:
    return (np.asarray(obs, dtype=np.float64) - stats.obs_mean) / stats.obs_std
