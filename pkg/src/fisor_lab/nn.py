"""Small MLPs with hand-written reverse mode and Adam.

All parameters of a network live in one flat vector; the per-layer weight
and bias arrays are views into it.  That keeps Adam, soft target updates,
checksums and checkpoints to a handful of vector operations.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def _layout(widths):
    shapes = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes.append(((fan_in, fan_out), (fan_out,)))
    return shapes


class MLP:
    """ReLU hidden layers, identity output layer."""

    def __init__(self, widths, params: np.ndarray | None = None, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeError(f"invalid widths {widths}")
        self.shapes = _layout(self.widths)
        self.n_params = sum(w[0] * w[1] + b[0] for w, b in self.shapes)
        if params is None:
            params = np.zeros(self.n_params)
        params = np.asarray(params, dtype=self.dtype)
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        i = 0
        for (wshape, bshape) in self.shapes:
            n = wshape[0] * wshape[1]
            self.weights.append(self.params[i:i + n].reshape(wshape))
            i += n
            self.biases.append(self.params[i:i + bshape[0]])
            i += bshape[0]

    @classmethod
    def init(cls, widths, rng: np.random.Generator, dtype=np.float64) -> "MLP":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

        Draws are made in float64 and then cast, so the RNG stream is the
        same for every dtype.
        """
        net = cls(widths, dtype=dtype)
        for w in net.weights:
            bound = 1.0 / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return net

    def copy(self) -> "MLP":
        return MLP(self.widths, self.params, self.dtype)

    def load_params(self, params: np.ndarray):
        self.params[...] = params

    def checksum(self) -> str:
        return hashlib.sha256(self.params.astype("<f8").tobytes()).hexdigest()

    def __call__(self, x):
        return forward(self, x)


def forward(net: MLP, x) -> np.ndarray:
    out, _ = forward_cached(net, x)
    return out


def forward_cached(net: MLP, x):
    """Forward pass keeping the activations needed by :func:`backward_cached`."""
    x = np.asarray(x, dtype=net.dtype)
    if x.shape[-1] != net.widths[0]:
        raise ShapeError(f"input width {x.shape[-1]} != {net.widths[0]}")
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backward_cached(net: MLP, acts, upstream) -> np.ndarray:
    """Flat gradient of ``sum(output * upstream)`` w.r.t. the parameters.

    Batch dimensions are summed; callers fold any ``1/batch`` into
    ``upstream``.  The ReLU derivative at exactly zero is taken as zero.
    """
    g = np.asarray(upstream, dtype=net.dtype)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    grad = np.empty(net.n_params, dtype=net.dtype)
    wg, bg = [], []
    for i in range(len(net.weights) - 1, -1, -1):
        inp = acts[i]
        a2 = inp.reshape(-1, inp.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        wg.append(a2.T @ g2)
        bg.append(g2.sum(axis=0))
        if i > 0:
            g = (g @ net.weights[i].T) * (inp > 0.0)
    j = 0
    for dw, db in zip(reversed(wg), reversed(bg)):
        grad[j:j + dw.size] = dw.ravel()
        j += dw.size
        grad[j:j + db.size] = db
        j += db.size
    return grad


def backward(net: MLP, x, upstream) -> np.ndarray:
    _, acts = forward_cached(net, x)
    return backward_cached(net, acts, upstream)


def split_grads(net: MLP, grad: np.ndarray):
    """View a flat gradient as per-layer ``(dW, db)`` pairs."""
    view = MLP(net.widths, grad, net.dtype)
    return list(zip(view.weights, view.biases))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: MLP, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(net.n_params, net.dtype), np.zeros(net.n_params, net.dtype), lr=lr, **kw)


def adam_step(net: MLP, grad: np.ndarray, opt: AdamState) -> None:
    """In-place bias-corrected Adam update of ``net`` and ``opt``."""
    grad = np.asarray(grad, dtype=net.dtype)
    if grad.shape != net.params.shape:
        raise ShapeError("gradient does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient at Adam step {opt.step + 1}")
    opt.step += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grad
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    net.params -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def soft_update(target: MLP, online: MLP, rate: float) -> None:
    if target.widths != online.widths:
        raise ShapeError(f"architecture mismatch {target.widths} vs {online.widths}")
    target.params *= 1.0 - rate
    target.params += rate * online.params


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"FSRN"


def _write_blob(path: Path, header: dict, arrays):
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(np.asarray(arr, dtype="<f8").tobytes())


def _read_blob(path: Path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    return header, np.frombuffer(raw[8 + n:], dtype="<f8").copy()


def save_checkpoint(path, net: MLP, step: int = 0, seed: int = 0, opt: AdamState | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"widths": list(net.widths), "step": int(step), "seed": int(seed),
              "n_params": net.n_params, "dtype": net.dtype.name, "extra": extra or {}}
    _write_blob(path, header, [net.params])
    if opt is not None:
        opt_header = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                      "eps": opt.eps, "n_params": net.n_params}
        _write_blob(path.with_name(path.name + ".adam"), opt_header, [opt.m, opt.v])
    return path


def load_checkpoint(path):
    """Return ``(net, header, adam_state_or_None)``."""
    path = Path(path)
    header, flat = _read_blob(path)
    dtype = np.dtype(header.get("dtype", "float64"))
    net = MLP(header["widths"], flat, dtype)
    opt = None
    adam_path = path.with_name(path.name + ".adam")
    if adam_path.exists():
        oh, mv = _read_blob(adam_path)
        n = oh["n_params"]
        opt = AdamState(mv[:n].astype(dtype), mv[n:].astype(dtype), oh["step"], oh["lr"], oh["beta1"],
                        oh["beta2"], oh["eps"])
    return net, header, opt
