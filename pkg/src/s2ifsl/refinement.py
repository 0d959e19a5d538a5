"""Novel-prototype refinement with softly pseudo-labeled unlabeled features.

Each step classifies the unlabeled features against ``[W_b, W_n]``, keeps only
the novel-class columns of the prediction (base-predicted samples then carry
almost no weight), re-estimates every prototype as a weighted mean of
unlabeled and support features, and blends it into the previous prototype.
All functions are differentiable in their tensor arguments.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import as_tensor, cosine_classify
from .types import ClassifierWeights, Episode, ValidationError

__all__ = [
    "EmptyUnlabeledWarning",
    "RefinementConfig",
    "slice_novel_predictions",
    "reestimate_prototypes",
    "ema_update",
    "refine_prototypes",
    "refine_loop",
]


class EmptyUnlabeledWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RefinementConfig:
    n_steps: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}")


def slice_novel_predictions(preds: torch.Tensor, n_base: int) -> torch.Tensor:
    """Novel-class columns of a joint prediction matrix, not renormalized."""
    if n_base >= preds.shape[1]:
        raise ValidationError(f"n_base={n_base} leaves no novel columns in {preds.shape[1]}")
    return preds[:, n_base:]


def reestimate_prototypes(y_novel: torch.Tensor, unlabeled_features: torch.Tensor,
                          support_features: torch.Tensor, support_labels, n_base: int) -> torch.Tensor:
    """Soft weighted mean of unlabeled and support features per novel class.

    Returns ``(d, N)``; column ``j`` uses the weights ``y_novel[:, j]``.
    """
    y_novel = as_tensor(y_novel)
    unlabeled_features = as_tensor(unlabeled_features)
    support_features = as_tensor(support_features)
    n_way = y_novel.shape[1]
    if unlabeled_features.shape[0] != y_novel.shape[0]:
        raise ValidationError("unlabeled features and predictions disagree on n_u")
    cols = torch.as_tensor(np.asarray(support_labels), dtype=torch.long) - n_base - 1
    onehot = F.one_hot(cols, n_way).to(support_features.dtype)
    numer = unlabeled_features.T @ y_novel + support_features.T @ onehot
    denom = y_novel.sum(dim=0) + onehot.sum(dim=0)
    return numer / denom


def ema_update(p_old: torch.Tensor, p_new: torch.Tensor, alpha: float) -> torch.Tensor:
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return p_new
    return alpha * p_new + (1.0 - alpha) * p_old


def refine_prototypes(base_weight: torch.Tensor, prototypes: torch.Tensor, unlabeled_features: torch.Tensor,
                      support_features: torch.Tensor, support_labels, gamma, cfg: RefinementConfig,
                      stop_gradient: bool = False) -> torch.Tensor:
    """Run ``cfg.n_steps`` classify/slice/re-estimate/blend iterations on ``W_n``.

    Predictions are recomputed against the current prototypes each step. With
    ``stop_gradient`` the soft assignment weights are detached.
    """
    n_base = base_weight.shape[1]
    protos = prototypes
    if unlabeled_features.shape[0] == 0:
        return protos
    for _ in range(cfg.n_steps):
        preds = cosine_classify(unlabeled_features, torch.cat([base_weight, protos], dim=1), gamma)
        y_novel = slice_novel_predictions(preds, n_base)
        if stop_gradient:
            y_novel = y_novel.detach()
        p_new = reestimate_prototypes(y_novel, unlabeled_features, support_features, support_labels, n_base)
        protos = ema_update(protos, p_new, cfg.alpha)
    return protos


@torch.no_grad()
def refine_loop(model, weights: ClassifierWeights, episode: Episode, cfg: RefinementConfig) -> ClassifierWeights:
    """Refine the novel columns of ``weights`` with the episode's unlabeled set.

    ``W_b`` is passed through untouched. An empty unlabeled set returns the
    input weights and emits :class:`EmptyUnlabeledWarning`.
    """
    if len(episode.unlabeled_X) == 0:
        warnings.warn("episode has no unlabeled samples; prototypes left unrefined", EmptyUnlabeledWarning)
        return weights
    unl = model(episode.unlabeled_X)
    sup = model(episode.support_X)
    novel = refine_prototypes(weights.base, weights.novel, unl, sup, episode.support_y,
                              model.gamma, cfg)
    return ClassifierWeights(weights.base, novel)
