"""Two-layer tanh encoder feeding a standard head and a balanced head.

Forward and backward passes are written by hand over row-major batches
(``x`` has shape ``(n, d)``).  Gradients are sums over the batch; any
averaging belongs to the loss that produced the upstream gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .numcore import InvalidInputError

CKPT_TAG = "semiforge-ckpt v1"


class TraceMismatchError(RuntimeError):
    """A trace was fed to backward with parameters it was not produced from."""


@dataclass(eq=False)
class ModelParams:
    W1: np.ndarray  # (hidden, d)
    b1: np.ndarray
    W2: np.ndarray  # (h, hidden)
    b2: np.ndarray
    W_std: np.ndarray  # (K, h)
    b_std: np.ndarray
    W_bal: np.ndarray  # (K, h)
    b_bal: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def h(self) -> int:
        return self.W2.shape[0]

    @property
    def K(self) -> int:
        return self.W_std.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for name, a in zip(self.names(), self.arrays()):
            out[name] = np.asarray(theta[pos : pos + a.size], dtype=np.float64).reshape(a.shape)
            pos += a.size
        if pos != theta.size:
            raise InvalidInputError("flat vector length does not match parameters")
        return ModelParams(**out)

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        return ModelParams(
            **{n: fn(getattr(self, n), *(getattr(o, n) for o in others)) for n in self.names()}
        )

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(d: int, K: int, h: int = 16, hidden: int = 64, seed: int = 0) -> ModelParams:
    """Gaussian init with std 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)

    def layer(n_out, n_in):
        return rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), np.zeros(n_out)

    W1, b1 = layer(hidden, d)
    W2, b2 = layer(h, hidden)
    Ws, bs = layer(K, h)
    Wb, bb = layer(K, h)
    return ModelParams(W1, b1, W2, b2, Ws, bs, Wb, bb)


@dataclass
class ForwardTrace:
    params: ModelParams
    x: np.ndarray
    a1: np.ndarray  # tanh output of the first layer
    embedding: np.ndarray  # tanh output of the second layer, shared by both heads
    logits_std: np.ndarray
    logits_bal: np.ndarray


def forward(params: ModelParams, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.d:
        raise InvalidInputError(f"expected inputs of width {params.d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("inputs contain non-finite values")
    a1 = np.tanh(x @ params.W1.T + params.b1)
    e = np.tanh(a1 @ params.W2.T + params.b2)
    return ForwardTrace(
        params=params,
        x=x,
        a1=a1,
        embedding=e,
        logits_std=e @ params.W_std.T + params.b_std,
        logits_bal=e @ params.W_bal.T + params.b_bal,
    )


def backward(params: ModelParams, trace: ForwardTrace, d_logits_std=None, d_logits_bal=None,
             d_embedding=None) -> ModelParams:
    """Gradients of a scalar loss given its gradients w.r.t. the trace outputs.

    Missing upstream gradients count as zero.
    """
    if trace.params is not params:
        raise TraceMismatchError("trace was produced with different parameters")
    n = trace.x.shape[0]
    K, h = params.K, params.h
    g_std = np.zeros((n, K)) if d_logits_std is None else np.asarray(d_logits_std, dtype=np.float64)
    g_bal = np.zeros((n, K)) if d_logits_bal is None else np.asarray(d_logits_bal, dtype=np.float64)
    g_e = np.zeros((n, h)) if d_embedding is None else np.array(d_embedding, dtype=np.float64)
    if g_std.shape != (n, K) or g_bal.shape != (n, K) or g_e.shape != (n, h):
        raise TraceMismatchError("upstream gradient shapes do not match the trace")

    e = trace.embedding
    g_e = g_e + g_std @ params.W_std + g_bal @ params.W_bal
    g_z2 = g_e * (1.0 - e**2)
    g_a1 = g_z2 @ params.W2
    g_z1 = g_a1 * (1.0 - trace.a1**2)
    return ModelParams(
        W1=g_z1.T @ trace.x,
        b1=g_z1.sum(0),
        W2=g_z2.T @ trace.a1,
        b2=g_z2.sum(0),
        W_std=g_std.T @ e,
        b_std=g_std.sum(0),
        W_bal=g_bal.T @ e,
        b_bal=g_bal.sum(0),
    )


@dataclass
class OptState:
    velocity: ModelParams
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def for_params(cls, params: ModelParams, lr=0.03, momentum=0.9, weight_decay=5e-4):
        return cls(params.zeros_like(), lr, momentum, weight_decay)


def sgd_step(params: ModelParams, grads: ModelParams, opt: OptState) -> ModelParams:
    """v <- m*v + g + wd*theta; theta <- theta - lr*v.  Returns new parameters."""
    opt.velocity = opt.velocity.map(
        lambda v, g, p: opt.momentum * v + g + opt.weight_decay * p, grads, params
    )
    return params.map(lambda p, v: p - opt.lr * v, opt.velocity)


def save_checkpoint(params: ModelParams, path) -> None:
    lines = [CKPT_TAG]
    for name, a in zip(params.names(), params.arrays()):
        mat = a.reshape(a.shape[0], -1) if a.ndim == 2 else a.reshape(1, -1)
        lines.append(f"param {name} {' '.join(str(s) for s in a.shape)}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CKPT_TAG:
        raise ValueError(f"{path}: missing {CKPT_TAG!r} header")
    arrays, i = {}, 1
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] != "param" or len(head) < 3:
            raise ValueError(f"{path}: line {i + 1}: expected a param block header")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(n_rows)]
        arrays[name] = np.array(rows, dtype=np.float64).reshape(shape)
        i += 1 + n_rows
    missing = set(ModelParams.names()) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing parameter blocks {sorted(missing)}")
    return ModelParams(**{n: arrays[n] for n in ModelParams.names()})
