"""Pseudo-labelling, hard-example weighting, the confidence-decay memory bank
and the loss terms of the two-branch objective.

Loss functions take logits (not probabilities) so that the gradient with
respect to those logits can be returned alongside the value when
``return_grad=True``.  Everything derived from the weak view (pseudo-labels,
masks, weights, the alignment target) is treated as a constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    InvalidInputError,
    check_probvec,
    entropy,
    log_softmax,
    one_hot,
    pairwise_dist,
    softmax,
)

log = logging.getLogger(__name__)

EASY_CONFIDENCE = 0.95


class ConfigError(ValueError):
    pass


class PrototypeUnavailable(LookupError):
    """No class in the memory bank holds any embedding yet."""


class DivergenceError(RuntimeError):
    pass


@dataclass
class SemiHyper:
    tau: float = 0.7
    s: float = 0.5
    T_e: float = 0.1
    T_p: float = 1.0
    T_b: float = 1.0
    alpha: float = 1.0
    beta: float = 0.999
    decay_interval: int = 50
    bank_capacity: int = 64
    rho: float = 0.05
    pi_eps: float = 1e-3
    bal_logit_adjust: bool = True

    @property
    def xi(self) -> float:
        return 1.0 - self.s

    def validate(self) -> None:
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if not 0 < self.s <= 1:
            raise ConfigError(f"s must be in (0, 1], got {self.s}")
        for name in ("T_e", "T_p"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.T_b < 0:
            raise ConfigError(f"T_b must be non-negative, got {self.T_b}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        if self.decay_interval < 1 or self.bank_capacity < 1:
            raise ConfigError("decay_interval and bank_capacity must be >= 1")
        if not 0 < self.rho <= 1 or not self.pi_eps > 0:
            raise ConfigError("rho must be in (0, 1] and pi_eps positive")


# -- masks and hardness -----------------------------------------------------

def hardness_class(p, tau: float) -> str:
    conf = float(np.max(check_probvec(p)))
    if conf >= EASY_CONFIDENCE:
        return "easy"
    # a confidence equal to tau is unmasked, so it counts as ultra-hard
    if conf > tau:
        return "hard"
    return "ultra_hard"


def mask_std(p, tau: float):
    """1 where the max probability strictly exceeds ``tau`` (row-wise)."""
    out = (np.max(check_probvec(p), axis=-1) > tau).astype(np.float64)
    return out if out.ndim else float(out)


def hardness_weight(p, s: float):
    """Normalised entropy rescaled into [1 - s, 1]: confident rows get 1 - s."""
    p = check_probvec(p)
    K = p.shape[-1]
    h = np.clip(np.asarray(entropy(p)) / math.log(K), 0.0, 1.0)
    w = h * s + (1.0 - s)
    return w if w.ndim else float(w)


def mask_bal(p_bal, pi, T_b: float, tau: float):
    """Logit-aligned mask on the balanced head: max p - T_b*ln(pi_k) > tau, k = argmax p."""
    if T_b < 0:
        raise ConfigError("T_b must be non-negative")
    p_bal = check_probvec(p_bal)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0):
        raise InvalidInputError("pi must be strictly positive")
    k = np.argmax(p_bal, axis=-1)
    score = np.max(p_bal, axis=-1) - T_b * np.log(pi[k])
    out = (score > tau).astype(np.float64)
    return out if out.ndim else float(out)


@dataclass
class PseudoRecords:
    """Per-sample pseudo-label state for one unlabeled batch (arrays over the batch)."""

    q: np.ndarray
    q_hat: np.ndarray
    q_prime: np.ndarray
    conf: np.ndarray
    mask_std: np.ndarray
    mask_bal: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return self.q.shape[0]


def make_records(probs_weak, tau: float, s: float | None) -> PseudoRecords:
    """Hard pseudo-labels, masks and weights from weak-view probabilities.

    ``s=None`` disables hard-example reweighting (weight 1 everywhere).
    Semantic labels and the balanced mask are filled in later.
    """
    probs_weak = check_probvec(probs_weak)
    n, K = probs_weak.shape
    q = one_hot(np.argmax(probs_weak, axis=1), K)
    weight = np.ones(n) if s is None else hardness_weight(probs_weak, s)
    return PseudoRecords(
        q=q,
        q_hat=q.copy(),
        q_prime=q.copy(),
        conf=probs_weak.max(axis=1),
        mask_std=mask_std(probs_weak, tau),
        mask_bal=np.zeros(n),
        weight=np.asarray(weight, dtype=np.float64),
    )


# -- losses -------------------------------------------------------------------

def _soft_ce(targets, logits, row_scale, adjust=None, return_grad=False):
    """Mean over rows of ``row_scale * CE(targets, softmax(logits + adjust))``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise InvalidInputError("expected a non-empty (batch, K) logit matrix")
    if targets.shape != logits.shape or row_scale.shape != (logits.shape[0],):
        raise InvalidInputError("records are not aligned with the logits")
    z = logits if adjust is None else logits + adjust
    n = logits.shape[0]
    per_row = -(targets * log_softmax(z)).sum(axis=1)
    value = float((row_scale * per_row).sum() / n)
    if not return_grad:
        return value
    # targets sum to one per row, so dCE/dz = softmax(z) - target
    grad = row_scale[:, None] * (softmax(z) - targets) / n
    return value, grad


def loss_supervised(logits, labels, adjust=None, return_grad=False):
    labels = np.asarray(labels, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    if labels.size == 0:
        raise InvalidInputError("empty batch")
    K = logits.shape[1]
    return _soft_ce(one_hot(labels, K), logits, np.ones(labels.size), adjust, return_grad)


def loss_unlabeled(records: PseudoRecords, logits_strong, return_grad=False):
    scale = records.mask_std * records.weight
    return _soft_ce(records.q_prime, logits_strong, scale, return_grad=return_grad)


def loss_embed_align(records: PseudoRecords, e_weak, e_strong, T_e: float, return_grad=False):
    """Unmasked rows pull the strong-view embedding distribution (temperature T_e)
    towards the softer weak-view one (temperature 5*T_e)."""
    e_weak = np.asarray(e_weak, dtype=np.float64)
    e_strong = np.asarray(e_strong, dtype=np.float64)
    if e_weak.shape != e_strong.shape or e_weak.shape[0] != len(records):
        raise InvalidInputError("embedding pairs are not aligned with the records")
    target = softmax(e_weak, 5.0 * T_e)
    value_grad = _soft_ce(target, e_strong / T_e, 1.0 - records.mask_std, return_grad=return_grad)
    if not return_grad:
        return value_grad
    value, grad = value_grad
    return value, grad / T_e


def loss_balanced_sup(logits_bal, labels, adjust=None, return_grad=False):
    return loss_supervised(logits_bal, labels, adjust, return_grad)


def loss_balanced_unsup(records: PseudoRecords, logits_bal_strong, adjust=None, return_grad=False):
    return _soft_ce(records.q_prime, logits_bal_strong, records.mask_bal, adjust, return_grad)


LOSS_NAMES = ("loss_s", "loss_u", "loss_ea", "loss_bs", "loss_bu")


def loss_total(L_S, L_U, L_EA, L_bS, L_bU) -> float:
    terms = (L_S, L_U, L_EA, L_bS, L_bU)
    if not all(math.isfinite(t) for t in terms):
        raise DivergenceError(f"non-finite loss term: {dict(zip(LOSS_NAMES, terms))}")
    return float(L_S + L_U + L_EA + L_bS + L_bU)


# -- memory bank ----------------------------------------------------------------

class MemoryBank:
    """Per-class fixed-capacity store of (embedding, confidence) pairs.

    With ``policy="confidence"`` a full cell only admits an embedding whose
    confidence strictly beats the cell minimum, which it then evicts; all
    confidences are multiplied by ``beta`` every ``decay_interval`` calls to
    :meth:`tick`.  Among equal minima the most recent entry is evicted, so the
    cell always holds the top ``capacity`` entries ranked by (confidence,
    older first).

    ``policy="fifo"`` is the plain class-balanced queue used when the
    confidence-decay bank is ablated: every offer is accepted, the oldest
    entry is evicted and decay is a no-op.
    """

    def __init__(self, K: int, capacity: int, h: int, beta: float = 0.999,
                 decay_interval: int = 50, policy: str = "confidence"):
        if policy not in ("confidence", "fifo"):
            raise ValueError(f"unknown bank policy {policy!r}")
        self.K, self.capacity, self.h = K, capacity, h
        self.beta, self.decay_interval, self.policy = beta, decay_interval, policy
        self.emb = np.zeros((K, capacity, h))
        self.conf = np.zeros((K, capacity))
        self.seq = np.zeros((K, capacity), dtype=np.int64)
        self.count = np.zeros(K, dtype=np.int64)
        self.steps = 0
        self._next_seq = 0

    def insert(self, k: int, embedding, confidence: float) -> bool:
        if not 0 <= k < self.K:
            raise InvalidInputError(f"class {k} out of range")
        if not 0 < confidence <= 1:
            raise InvalidInputError(f"confidence must be in (0, 1], got {confidence}")
        n = self.count[k]
        if n < self.capacity:
            slot = n
            self.count[k] += 1
        elif self.policy == "fifo":
            slot = int(np.argmin(self.seq[k]))
        else:
            conf = self.conf[k]
            low = conf.min()
            if not confidence > low:
                return False
            tied = np.flatnonzero(conf == low)
            slot = int(tied[np.argmax(self.seq[k, tied])])
        self.emb[k, slot] = embedding
        self.conf[k, slot] = confidence
        self.seq[k, slot] = self._next_seq
        self._next_seq += 1
        return True

    def decay(self) -> None:
        if self.policy == "confidence":
            self.conf *= self.beta

    def tick(self) -> None:
        """Advance the step counter, decaying on every ``decay_interval``-th step."""
        self.steps += 1
        if self.steps % self.decay_interval == 0:
            self.decay()

    def entries(self, k: int) -> list[tuple[np.ndarray, float]]:
        n = self.count[k]
        return [(self.emb[k, i].copy(), float(self.conf[k, i])) for i in range(n)]

    def prototypes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-class mean embeddings and a validity mask (empty cells give zeros)."""
        protos = np.zeros((self.K, self.h))
        valid = self.count > 0
        for k in np.flatnonzero(valid):
            protos[k] = self.emb[k, : self.count[k]].mean(axis=0)
        return protos, valid


# -- semantic labels and mixing -------------------------------------------------

def semantic_label(e_strong, protos, valid, T_p: float) -> np.ndarray:
    """Softmax over classes of -distance/T_p; classes without a prototype get 0."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise PrototypeUnavailable("memory bank has no prototypes yet")
    e = np.atleast_2d(np.asarray(e_strong, dtype=np.float64))
    scores = -pairwise_dist(e, np.asarray(protos, dtype=np.float64)) / T_p
    out = np.zeros_like(scores)
    out[:, valid] = softmax(scores[:, valid])
    return out[0] if np.ndim(e_strong) == 1 else out


def mix_labels(q, q_hat, gamma: float, w_k):
    """(1 - gamma*w_k) q + gamma*w_k q_hat, with the coefficient clamped to [0, 1]."""
    q = np.asarray(q, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    coef = gamma * np.asarray(w_k, dtype=np.float64)
    if np.any(coef < 0) or np.any(coef > 1):
        log.warning("mixing coefficient outside [0, 1]; clamping")
        coef = np.clip(coef, 0.0, 1.0)
    if q.ndim == 2:
        coef = coef.reshape(-1, 1)
    return (1.0 - coef) * q + coef * q_hat


def mix_schedule(epoch_current, epoch_total, alpha: float) -> float:
    if not 0 <= epoch_current <= epoch_total:
        raise InvalidInputError("need 0 <= epoch_current <= epoch_total")
    if epoch_total == 0:
        return 0.0
    return alpha * epoch_current / epoch_total


# -- class-distribution tracking ---------------------------------------------

@dataclass
class ClassDistTracker:
    """EMA of the pseudo-label class histogram and the cumulative label prior.

    ``m_raw`` is the unsmoothed EMA; both exposed distributions are smoothed
    as (x + eps) / (1 + K*eps) so no class ever reaches zero.
    """

    K: int
    rho: float = 0.05
    eps: float = 1e-3
    m_raw: np.ndarray = field(default=None)
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m_raw is None:
            self.m_raw = np.full(self.K, 1.0 / self.K)
        if self.counts is None:
            self.counts = np.zeros(self.K)

    def _smooth(self, x):
        return (x + self.eps) / (1.0 + self.K * self.eps)

    @property
    def m_tilde(self) -> np.ndarray:
        return self._smooth(self.m_raw)

    @property
    def pi(self) -> np.ndarray:
        total = self.counts.sum()
        base = self.counts / total if total > 0 else np.full(self.K, 1.0 / self.K)
        return self._smooth(base)

    def class_weights(self) -> np.ndarray:
        m = self.m_tilde
        return m / m.max()

    def class_weight(self, k: int) -> float:
        return float(self.class_weights()[k])

    def update(self, labeled_labels, pseudo_labels) -> None:
        labeled_labels = np.asarray(labeled_labels, dtype=np.int64)
        pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
        if pseudo_labels.size:
            hist = np.bincount(pseudo_labels, minlength=self.K) / pseudo_labels.size
            self.m_raw = (1.0 - self.rho) * self.m_raw + self.rho * hist
        self.counts = self.counts + np.bincount(
            np.concatenate([labeled_labels, pseudo_labels]), minlength=self.K
        )
