"""Synthetic long-tailed splits, vector augmentations and the dataset file format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_TAG = "semiforge-dataset v1"
SPLITS = ("labeled", "unlabeled", "test")
MAX_COUNT = 10**8


class InvalidProfileError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class ClassProfile:
    K: int
    N1: int
    M1: int
    gamma_l: float
    gamma_u: float

    def __post_init__(self):
        if self.K < 2:
            raise InvalidProfileError(f"K must be >= 2, got {self.K}")
        if self.N1 < 1 or self.M1 < 1:
            raise InvalidProfileError("N1 and M1 must be >= 1")
        if not (self.gamma_l > 0 and self.gamma_u > 0):
            raise InvalidProfileError("imbalance ratios must be positive")
        if not (math.isfinite(self.gamma_l) and math.isfinite(self.gamma_u)):
            raise InvalidProfileError("imbalance ratios must be finite")


@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.05
    sigma_strong: float = 0.25
    drop_prob: float = 0.3

    def __post_init__(self):
        if not 0 <= self.sigma_weak < self.sigma_strong:
            raise ValueError("need 0 <= sigma_weak < sigma_strong")
        if not 0 <= self.drop_prob < 1:
            raise ValueError("drop_prob must be in [0, 1)")


@dataclass(eq=False)
class Dataset:
    """Labeled, unlabeled and test splits as arrays.

    ``y_hidden`` holds the true classes of the unlabeled split.  It is kept for
    diagnostics only and the training step never reads it.
    """

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    y_hidden: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    K: int
    d: int
    seed: int
    gamma_u_hidden: bool = field(default=False)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("x_labeled", "y_labeled", "x_unlabeled", "y_hidden", "x_test", "y_test")
        return (
            (self.K, self.d, self.seed) == (other.K, other.d, other.seed)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    def feature_std(self) -> np.ndarray:
        """Per-feature std over the training features (labels not used)."""
        xs = np.concatenate([self.x_labeled, self.x_unlabeled])
        std = xs.std(axis=0)
        return np.where(std > 0, std, 1.0)


def _profile_counts(head: int, gamma: float, K: int) -> np.ndarray:
    counts = []
    for k in range(K):
        value = head * gamma ** (-k / (K - 1))
        if not math.isfinite(value) or value > MAX_COUNT:
            raise InvalidProfileError(f"class {k + 1} count overflows ({value})")
        counts.append(max(1, int(round(value))))
    counts[0] = head
    return np.array(counts, dtype=np.int64)


def class_counts(profile: ClassProfile) -> tuple[np.ndarray, np.ndarray]:
    """Per-class labeled and unlabeled counts, N_k = round(N1 * gamma_l^(-(k-1)/(K-1)))."""
    return (
        _profile_counts(profile.N1, profile.gamma_l, profile.K),
        _profile_counts(profile.M1, profile.gamma_u, profile.K),
    )


def class_centers(K: int, d: int, class_sep: float, rng: np.random.Generator) -> np.ndarray:
    """K centers on a sphere around the origin, min pairwise distance exactly ``class_sep``.

    With d >= K - 1 the centers form a randomly rotated regular simplex, so all
    pairs sit at the same distance.  Otherwise random directions are rescaled.
    """
    if d >= K - 1:
        simplex = np.eye(K) - 1.0 / K
        # orthonormal basis of the (K-1)-dim subspace the simplex lives in
        u, _, _ = np.linalg.svd(simplex)
        coords = simplex @ u[:, : K - 1]
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        centers = coords @ q[: K - 1, :]
    else:
        centers = rng.standard_normal((K, d))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    min_dist = dist[~np.eye(K, dtype=bool)].min()
    return centers * (class_sep / min_dist)


def synth_dataset(
    profile: ClassProfile,
    d: int,
    class_sep: float,
    test_per_class: int,
    seed: int,
    hide_gamma_u: bool = False,
) -> Dataset:
    if d < 2:
        raise InvalidProfileError("d must be >= 2")
    if not class_sep > 0:
        raise InvalidProfileError("class_sep must be positive")
    if test_per_class < 1:
        raise InvalidProfileError("test_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centers = class_centers(profile.K, d, class_sep, rng)
    n_lab, n_unl = class_counts(profile)

    def draw(counts):
        labels = np.repeat(np.arange(profile.K), counts)
        x = centers[labels] + rng.standard_normal((labels.size, d))
        order = rng.permutation(labels.size)
        return x[order], labels[order]

    x_l, y_l = draw(n_lab)
    x_u, y_u = draw(n_unl)
    x_t, y_t = draw(np.full(profile.K, test_per_class))
    return Dataset(x_l, y_l, x_u, y_u, x_t, y_t, profile.K, d, seed, hide_gamma_u)


def augment_weak(x, cfg: AugmentConfig, rng: np.random.Generator, feature_std=None) -> np.ndarray:
    """Additive Gaussian noise at ``sigma_weak`` times the per-feature std."""
    x = np.asarray(x, dtype=np.float64)
    scale = 1.0 if feature_std is None else np.asarray(feature_std)
    if cfg.sigma_weak == 0:
        return x.copy()
    return x + rng.standard_normal(x.shape) * (cfg.sigma_weak * scale)


def augment_strong(x, cfg: AugmentConfig, rng: np.random.Generator, feature_std=None) -> np.ndarray:
    """Noise at ``sigma_strong`` followed by independent feature dropout."""
    x = np.asarray(x, dtype=np.float64)
    scale = 1.0 if feature_std is None else np.asarray(feature_std)
    out = x + rng.standard_normal(x.shape) * (cfg.sigma_strong * scale)
    if cfg.drop_prob > 0:
        out = np.where(rng.random(x.shape) < cfg.drop_prob, 0.0, out)
    return out


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"{HEADER_TAG} K={ds.K} d={ds.d} seed={ds.seed}"]
    for split, xs, ys in (
        ("labeled", ds.x_labeled, ds.y_labeled),
        ("unlabeled", ds.x_unlabeled, ds.y_hidden),
        ("test", ds.x_test, ds.y_test),
    ):
        for x, y in zip(xs, ys):
            lines.append(",".join([split, str(int(y))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int]:
    if not line.startswith(HEADER_TAG + " "):
        raise DatasetParseError(1, f"expected header starting with {HEADER_TAG!r}")
    fields = {}
    for tok in line[len(HEADER_TAG):].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise DatasetParseError(1, f"bad header field {tok!r}")
        try:
            fields[key] = int(value)
        except ValueError:
            raise DatasetParseError(1, f"header field {key} is not an integer") from None
    try:
        return fields["K"], fields["d"], fields["seed"]
    except KeyError as exc:
        raise DatasetParseError(1, f"header missing {exc.args[0]}") from None


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetParseError(1, "empty file")
    K, d, seed = _parse_header(lines[0])
    rows = {s: ([], []) for s in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if parts[0] not in rows:
            raise DatasetParseError(lineno, f"unknown split {parts[0]!r}")
        if len(parts) != d + 2:
            raise DatasetParseError(lineno, f"expected {d + 2} fields, got {len(parts)}")
        try:
            label = int(parts[1])
            feats = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetParseError(lineno, str(exc)) from None
        if not 0 <= label < K:
            raise DatasetParseError(lineno, f"label {label} outside [0, {K})")
        if not all(math.isfinite(v) for v in feats):
            raise DatasetParseError(lineno, "non-finite feature")
        rows[parts[0]][0].append(feats)
        rows[parts[0]][1].append(label)

    def arrays(split):
        xs, ys = rows[split]
        return np.array(xs, dtype=np.float64).reshape(-1, d), np.array(ys, dtype=np.int64)

    x_l, y_l = arrays("labeled")
    x_u, y_u = arrays("unlabeled")
    x_t, y_t = arrays("test")
    return Dataset(x_l, y_l, x_u, y_u, x_t, y_t, K, d, seed)
