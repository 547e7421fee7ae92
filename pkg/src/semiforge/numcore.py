"""Dense numeric helpers shared by every other module.

Matrices and probability vectors are plain float64 ``numpy`` arrays; the
functions here validate them at the boundary and otherwise stay out of the
way.  Probability transforms work along the last axis so they accept a single
vector or a batch of row vectors.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

LOG_EPS = 1e-12
PROB_ATOL = 1e-9


class InvalidInputError(ValueError):
    """Raised for non-finite values, bad shapes or mismatched lengths."""


class OracleFailure(RuntimeError):
    """The finite-difference oracle could not produce a usable estimate."""


def as_vector(x, name="x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_probvec(p, name="p") -> np.ndarray:
    """Return ``p`` as an array after checking it is a distribution (row-wise)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if np.any(arr < -PROB_ATOL) or np.any(arr > 1 + PROB_ATOL):
        raise InvalidInputError(f"{name} has entries outside [0, 1]")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > PROB_ATOL):
        raise InvalidInputError(f"{name} does not sum to 1")
    return arr


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, stabilised by max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input contains non-finite values")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(target, prediction) -> float | np.ndarray:
    """``-sum_k target_k * ln(prediction_k)`` with the prediction clamped at 1e-12.

    Batched inputs return one value per row.
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(prediction, dtype=np.float64)
    if t.shape != p.shape:
        raise InvalidInputError(f"length mismatch: {t.shape} vs {p.shape}")
    out = -(t * np.log(np.maximum(p, LOG_EPS))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float | np.ndarray:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    arr = check_probvec(p)
    safe = np.where(arr > 0, arr, 1.0)
    out = -(np.where(arr > 0, arr * np.log(safe), 0.0)).sum(axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def euclidean_dist(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()))


def pairwise_dist(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``queries`` (n, h) and ``points`` (K, h)."""
    diff = queries[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], K))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    params,
    analytic,
    step: float = 1e-4,
) -> float:
    """Max relative error between ``analytic`` and central finite differences.

    The relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``params`` is not modified.
    """
    theta = np.array(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise InvalidInputError("analytic gradient shape does not match params")
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = loss_fn(theta.copy())
        theta[i] = orig - step
        down = loss_fn(theta.copy())
        theta[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise OracleFailure(f"non-finite loss while perturbing coordinate {i}")
        numeric[i] = (up - down) / (2 * step)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if theta.size else 0.0
