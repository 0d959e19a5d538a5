"""Gaussian-cluster dataset bundles with controllable base/novel confusability."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import DatasetBundle, Split, ValidationError

__all__ = ["SyntheticSpec", "synthesize_dataset", "class_centers", "fine_basis"]


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters.

    ``confusability`` is the fraction of novel cluster centres placed within
    ``2 * cluster_spread`` (Euclidean) of a randomly chosen base centre; the
    rest are drawn independently like base centres.

    With ``fine_dims > 0`` the confusable offsets lie in a fixed random
    ``fine_dims``-dimensional subspace along which within-class noise is scaled
    by ``fine_noise``. Such pairs are separable only by features that amplify
    that subspace.
    """

    n_base_classes: int = 20
    n_novel_train: int = 30
    n_novel_val: int = 10
    n_novel_test: int = 10
    input_dim: int = 32
    base_train_per_class: int = 100
    base_val_per_class: int = 20
    base_test_per_class: int = 30
    novel_per_class: int = 100
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    confusability: float = 0.5
    fine_dims: int = 0
    fine_noise: float = 1.0

    def __post_init__(self):
        counts = [self.n_base_classes, self.n_novel_train, self.n_novel_val, self.n_novel_test, self.input_dim,
                  self.base_train_per_class, self.base_val_per_class, self.base_test_per_class,
                  self.novel_per_class]
        if min(counts) < 1:
            raise ValidationError("all class and sample counts must be positive")
        if not 0.0 <= self.confusability <= 1.0:
            raise ValidationError("confusability must lie in [0, 1]")
        if not 0 <= self.fine_dims <= self.input_dim or self.fine_noise <= 0:
            raise ValidationError("fine_dims must lie in [0, input_dim] and fine_noise be positive")
        if self.cluster_spread <= 0 or self.center_scale <= 0:
            raise ValidationError("cluster_spread and center_scale must be positive")

    @property
    def n_novel_classes(self) -> int:
        return self.n_novel_train + self.n_novel_val + self.n_novel_test


def fine_basis(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Orthonormal ``(D, D)`` rotation; its first ``fine_dims`` columns span the fine subspace."""
    rng = np.random.default_rng([int(seed), 2])
    q, _ = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.input_dim)))
    return q


def class_centers(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(base_centers, novel_centers, anchor)``.

    ``anchor[j]`` is the base class id (1-based) a confusable novel centre was
    placed next to, or 0 for independently drawn centres.
    """
    rng = np.random.default_rng([int(seed), 0])
    D = spec.input_dim
    # Independent centres sit ~center_scale * sqrt(2D) apart; offsets are tiny by comparison.
    base = rng.standard_normal((spec.n_base_classes, D)) * spec.center_scale
    novel = rng.standard_normal((spec.n_novel_classes, D)) * spec.center_scale
    anchor = np.zeros(spec.n_novel_classes, dtype=np.int64)
    confusable = rng.random(spec.n_novel_classes) < spec.confusability
    basis = fine_basis(spec, seed)[:, :spec.fine_dims] if spec.fine_dims else np.eye(D)
    for j in np.flatnonzero(confusable):
        b = rng.integers(spec.n_base_classes)
        direction = basis @ rng.standard_normal(basis.shape[1])
        direction /= np.linalg.norm(direction)
        radius = spec.cluster_spread * rng.uniform(1.0, 2.0)
        novel[j] = base[b] + radius * direction
        anchor[j] = b + 1
    return base, novel, anchor


def synthesize_dataset(spec: SyntheticSpec, seed: int = 0) -> DatasetBundle:
    """Draw Gaussian clusters with std ``cluster_spread`` (shrunk by ``fine_noise`` in the fine subspace).

    Base classes get ids ``1..N_b``; novel train/val/test classes follow in order.
    """
    base_c, novel_c, _ = class_centers(spec, seed)
    rng = np.random.default_rng([int(seed), 1])
    D, s = spec.input_dim, spec.cluster_spread
    scale = np.ones(D)
    scale[:spec.fine_dims] = spec.fine_noise
    noise_map = fine_basis(spec, seed) * scale  # rotation with the fine columns shrunk

    def draw(centers, ids, per_class):
        X = np.concatenate([c + s * rng.standard_normal((per_class, D)) @ noise_map.T for c in centers])
        y = np.repeat(np.asarray(ids, dtype=np.int64), per_class)
        return Split(X, y)

    nb = spec.n_base_classes
    base_ids = np.arange(1, nb + 1)
    splits = {
        "base_train": draw(base_c, base_ids, spec.base_train_per_class),
        "base_val": draw(base_c, base_ids, spec.base_val_per_class),
        "base_test": draw(base_c, base_ids, spec.base_test_per_class),
    }
    start = nb + 1
    for name, n in (("novel_train", spec.n_novel_train), ("novel_val", spec.n_novel_val),
                    ("novel_test", spec.n_novel_test)):
        ids = np.arange(start, start + n)
        splits[name] = draw(novel_c[ids - nb - 1], ids, spec.novel_per_class)
        start += n
    return DatasetBundle(**splits)
