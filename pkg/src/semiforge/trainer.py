"""Warmup plus two-branch training on a :class:`~semiforge.datagen.Dataset`."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import semi
from .datagen import AugmentConfig, Dataset, augment_strong, augment_weak
from .model import ModelParams, OptState, backward, forward, init_params, sgd_step
from .numcore import InvalidInputError, softmax
from .semi import ConfigError, DivergenceError, SemiHyper

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
ABLATION_FLAGS = ("use_bank", "use_oheml", "use_ea", "use_plce", "use_balanced")


@dataclass
class TrainConfig:
    epochs_total: int = 30
    steps_per_epoch: int = 50
    batch_labeled: int = 32
    batch_unlabeled: int = 64
    warmup_epochs: int = 5
    warmup_tau: float = 0.95
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: int = 64
    h: int = 16
    sigma_weak: float = 0.05
    sigma_strong: float = 0.25
    drop_prob: float = 0.3
    seed: int = 0
    use_bank: bool = True
    use_oheml: bool = True
    use_ea: bool = True
    use_plce: bool = True
    use_balanced: bool = True
    semi: SemiHyper = field(default_factory=SemiHyper)

    def validate(self) -> None:
        if self.epochs_total < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs_total must be >= 0 and steps_per_epoch >= 1")
        if self.epochs_total > 0 and not 0 <= self.warmup_epochs < self.epochs_total:
            raise ConfigError("warmup_epochs must be < epochs_total")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0 < self.warmup_tau < 1:
            raise ConfigError("warmup_tau must be in (0, 1)")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("bad optimizer settings")
        try:
            self.augment()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.semi.validate()

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.sigma_weak, self.sigma_strong, self.drop_prob)

    @property
    def headline(self) -> str:
        return "bal" if self.use_balanced else "std"

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "semi"}
        out.update(asdict(self.semi))
        return out


def baseline_config(**overrides) -> TrainConfig:
    """Plain FixMatch: every component off and the usual 0.95 threshold."""
    cfg = TrainConfig(**{flag: False for flag in ABLATION_FLAGS}, **overrides)
    cfg.semi.tau = cfg.warmup_tau
    return cfg


@dataclass
class StepResult:
    losses: dict
    records: semi.PseudoRecords
    grads: ModelParams
    total: float


@dataclass
class EpochMetrics:
    epoch: int
    acc_std: float
    acc_bal: float
    acc_per_class: list
    mask_prob: float
    used_acc: float
    mean_weight: float
    gamma_u_est: float
    loss_s: float
    loss_u: float
    loss_ea: float
    loss_bs: float
    loss_bu: float
    confusion: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate(params: ModelParams, x_test, y_test, K: int | None = None) -> dict:
    """Top-1 accuracy overall and per class for both heads, plus confusion matrices."""
    y_test = np.asarray(y_test, dtype=np.int64)
    if y_test.size == 0:
        raise InvalidInputError("empty test set")
    K = params.K if K is None else K
    tr = forward(params, x_test)
    out = {}
    for head, logits in (("std", tr.logits_std), ("bal", tr.logits_bal)):
        pred = np.argmax(logits, axis=1)
        conf = np.zeros((K, K), dtype=np.int64)
        np.add.at(conf, (y_test, pred), 1)
        support = conf.sum(axis=1)
        per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), 0.0)
        out[f"acc_{head}"] = float((pred == y_test).mean())
        out[f"per_class_{head}"] = per_class
        out[f"confusion_{head}"] = conf
    return out


def mask_probability(params: ModelParams, x_unlabeled, tau: float, aug: AugmentConfig,
                     seed: int, feature_std=None) -> float:
    """Fraction of weak views whose standard-head confidence passes ``tau``.

    The weak views are drawn from ``seed`` so thresholds can be compared on
    identical inputs.
    """
    xw = augment_weak(x_unlabeled, aug, np.random.default_rng(seed), feature_std)
    probs = softmax(forward(params, xw).logits_std)
    return float(np.mean(semi.mask_std(probs, tau)))


class Trainer:
    """Mutable training state: parameters, optimizer, memory bank and trackers."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset):
        cfg.validate()
        self.cfg = cfg
        self.ds = dataset
        self.K = dataset.K
        init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        self.params = init_params(
            dataset.d, self.K, cfg.h, cfg.hidden,
            seed=int(init_seed.generate_state(1)[0]),
        )
        self.rng = np.random.default_rng(sample_seed)
        self.opt = OptState.for_params(self.params, cfg.lr, cfg.momentum, cfg.weight_decay)
        hp = cfg.semi
        self.bank = semi.MemoryBank(
            self.K, hp.bank_capacity, cfg.h, hp.beta, hp.decay_interval,
            policy="confidence" if cfg.use_bank else "fifo",
        )
        self.tracker = semi.ClassDistTracker(self.K, hp.rho, hp.pi_eps)
        self.feature_std = dataset.feature_std()
        self.epoch = 0

    @property
    def in_warmup(self) -> bool:
        return self.epoch < self.cfg.warmup_epochs

    def sample_batches(self):
        ds, cfg = self.ds, self.cfg
        il = self.rng.integers(0, ds.y_labeled.size, cfg.batch_labeled)
        iu = self.rng.integers(0, ds.y_hidden.size, cfg.batch_unlabeled)
        return ds.x_labeled[il], ds.y_labeled[il], ds.x_unlabeled[iu], ds.y_hidden[iu]

    def augment(self, xu):
        aug = self.cfg.augment()
        xw = augment_weak(xu, aug, self.rng, self.feature_std)
        xs = augment_strong(xu, aug, self.rng, self.feature_std)
        return xw, xs

    def train_step(self, xl, yl, xu) -> StepResult:
        xw, xs = self.augment(xu)
        return self.step_on_views(xl, yl, xw, xs)

    def compute_step(self, xl, yl, xw, xs):
        """Losses and gradients for one batch without touching any state.

        Returns ``(StepResult, strong-view embeddings)``.
        """
        cfg, hp = self.cfg, self.cfg.semi
        warm = self.in_warmup
        params = self.params
        tau = cfg.warmup_tau if warm else hp.tau

        tw = forward(params, xw)
        records = semi.make_records(
            softmax(tw.logits_std), tau, hp.s if (cfg.use_oheml and not warm) else None
        )
        tl = forward(params, xl)
        ts = forward(params, xs)

        if cfg.use_plce and not warm:
            protos, valid = self.bank.prototypes()
            if valid.any():
                q_hat = semi.semantic_label(ts.embedding, protos, valid, hp.T_p)
                gamma = semi.mix_schedule(
                    self.epoch - cfg.warmup_epochs, cfg.epochs_total - cfg.warmup_epochs, hp.alpha
                )
                w_k = self.tracker.class_weights()[np.argmax(records.q, axis=1)]
                records.q_hat = q_hat
                records.q_prime = semi.mix_labels(records.q, q_hat, gamma, w_k)

        branch = cfg.use_balanced and not warm
        adjust = None
        if branch:
            pi = self.tracker.pi
            records.mask_bal = semi.mask_bal(softmax(tw.logits_bal), pi, hp.T_b, tau)
            if hp.bal_logit_adjust:
                adjust = hp.T_b * np.log(pi)

        n_l, n_u = len(yl), len(xs)
        K, h = self.K, params.h
        losses = dict.fromkeys(semi.LOSS_NAMES, 0.0)
        g_l_std = g_l_bal = np.zeros((n_l, K))
        g_s_bal = np.zeros((n_u, K))
        g_s_emb = np.zeros((n_u, h))

        losses["loss_s"], g_l_std = semi.loss_supervised(tl.logits_std, yl, return_grad=True)
        losses["loss_u"], g_s_std = semi.loss_unlabeled(records, ts.logits_std, return_grad=True)
        if cfg.use_ea and not warm:
            losses["loss_ea"], g_s_emb = semi.loss_embed_align(
                records, tw.embedding, ts.embedding, hp.T_e, return_grad=True
            )
        if branch:
            losses["loss_bs"], g_l_bal = semi.loss_balanced_sup(
                tl.logits_bal, yl, adjust, return_grad=True
            )
            losses["loss_bu"], g_s_bal = semi.loss_balanced_unsup(
                records, ts.logits_bal, adjust, return_grad=True
            )

        total = semi.loss_total(*(losses[n] for n in semi.LOSS_NAMES))
        if total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss {total:.3g} exceeds {DIVERGENCE_LIMIT:g}: {losses}")
        g_lab = backward(params, tl, g_l_std, g_l_bal)
        g_str = backward(params, ts, g_s_std, g_s_bal, g_s_emb)
        grads = g_lab.map(np.add, g_str)
        return StepResult(losses, records, grads, total), ts.embedding

    def step_on_views(self, xl, yl, xw, xs) -> StepResult:
        result, e_strong = self.compute_step(xl, yl, xw, xs)
        self.params = sgd_step(self.params, result.grads, self.opt)

        records = result.records
        masked = np.flatnonzero(records.mask_std > 0)
        labels = np.argmax(records.q_prime, axis=1)
        for j in masked:
            self.bank.insert(int(labels[j]), e_strong[j], float(records.conf[j]))
        self.bank.tick()
        self.tracker.update(yl, labels[masked])
        return result


def _gamma_u_estimate(pred, K: int) -> float:
    counts = np.bincount(pred, minlength=K)
    return float(counts.max() / max(counts.min(), 1))


def run_experiment(cfg: TrainConfig, dataset: Dataset,
                   on_epoch: Callable[[EpochMetrics], None] | None = None) -> "ExperimentResult":
    """Warmup then joint training, evaluating after every epoch."""
    trainer = Trainer(cfg, dataset)
    initial = trainer.params.copy()
    history: list[EpochMetrics] = []
    best_idx, best_acc, best_params = None, -1.0, initial
    for epoch in range(cfg.epochs_total):
        trainer.epoch = epoch
        sums = dict.fromkeys(semi.LOSS_NAMES, 0.0)
        n_seen = n_masked = n_used = 0
        weight_sum = 0.0
        for _ in range(cfg.steps_per_epoch):
            xl, yl, xu, hidden = trainer.sample_batches()
            res = trainer.train_step(xl, yl, xu)
            for name in semi.LOSS_NAMES:
                sums[name] += res.losses[name]
            mask = res.records.mask_std > 0
            n_seen += mask.size
            n_masked += int(mask.sum())
            n_used += int((np.argmax(res.records.q_prime, axis=1)[mask] == hidden[mask]).sum())
            weight_sum += float(res.records.weight.sum())

        ev = evaluate(trainer.params, dataset.x_test, dataset.y_test, dataset.K)
        head = cfg.headline
        unl_logits = forward(trainer.params, dataset.x_unlabeled)
        unl_pred = np.argmax(unl_logits.logits_bal if head == "bal" else unl_logits.logits_std, 1)
        m = EpochMetrics(
            epoch=epoch,
            acc_std=ev["acc_std"],
            acc_bal=ev["acc_bal"],
            acc_per_class=[float(v) for v in ev[f"per_class_{head}"]],
            mask_prob=n_masked / n_seen,
            used_acc=n_used / n_masked if n_masked else 0.0,
            mean_weight=weight_sum / n_seen,
            gamma_u_est=_gamma_u_estimate(unl_pred, dataset.K),
            **{name: sums[name] / cfg.steps_per_epoch for name in semi.LOSS_NAMES},
            confusion=ev[f"confusion_{head}"].tolist(),
        )
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
        acc = headline_acc(m, cfg)
        if acc > best_acc:
            best_idx, best_acc, best_params = epoch, acc, trainer.params.copy()
        log.debug("epoch %d acc_std=%.4f acc_bal=%.4f mask=%.3f", epoch, m.acc_std, m.acc_bal,
                  m.mask_prob)
    return ExperimentResult(history, best_idx, initial, trainer.params, best_params)


def headline_acc(m: EpochMetrics, cfg: TrainConfig) -> float:
    return m.acc_bal if cfg.use_balanced else m.acc_std


@dataclass
class ExperimentResult:
    history: list
    best_epoch: int | None
    initial_params: ModelParams
    final_params: ModelParams
    best_params: ModelParams

    @property
    def best(self) -> EpochMetrics | None:
        return None if self.best_epoch is None else self.history[self.best_epoch]


def metrics_from_json(line: str) -> EpochMetrics:
    data = json.loads(line)
    names = {f.name for f in fields(EpochMetrics)}
    missing = names - set(data) - {"confusion"}
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    for key in ("mask_prob", "used_acc", "acc_std", "acc_bal"):
        if not (isinstance(data[key], (int, float)) and math.isfinite(data[key])):
            raise ValueError(f"field {key} is not a finite number")
    return EpochMetrics(**{k: v for k, v in data.items() if k in names})
