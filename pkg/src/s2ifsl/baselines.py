"""Comparison methods: label propagation, FixMatch-style adaptation, plain PR."""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .adaptation import AugmentationSpec, make_views
from .evaluation import EpisodeMetrics, restricted_predictions, score_episode
from .model import COS_EPS, IncrementalCosineModel, as_tensor, compute_prototypes, cosine_classify
from .refinement import RefinementConfig, refine_loop
from .training import LOG_EPS, cross_entropy_loss
from .types import ClassifierWeights, Episode, ValidationError

__all__ = [
    "DisconnectedVertexWarning",
    "GraphConfig",
    "FixMatchConfig",
    "label_propagation_predict",
    "fixmatch_consistency_loss",
    "fixmatch_adapt",
    "run_plain_pr",
]


class DisconnectedVertexWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GraphConfig:
    bandwidth: float = 1.0
    damping: float = 0.9
    iterations: int = 20

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValidationError("bandwidth must be positive")
        if not 0.0 < self.damping < 1.0:
            raise ValidationError("damping must lie in (0, 1)")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")


@dataclass(frozen=True)
class FixMatchConfig:
    threshold: float = 0.95
    consistency_weight: float = 1.0
    supervised_weight: float = 1.0
    steps: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weak: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(0.05, 0.0))
    strong: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(0.3, 0.3))
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError("threshold must lie in [0, 1]")
        if self.consistency_weight < 0 or self.supervised_weight < 0:
            raise ValidationError("loss weights must be non-negative")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), COS_EPS)


def label_propagation_predict(weights: ClassifierWeights, unlabeled_features, query_features,
                              cfg: GraphConfig, gamma: float = 10.0) -> np.ndarray:
    """Damped label spreading from class-weight vertices to unlabeled and query vertices.

    Vertices are the ``C`` weight columns (labeled, one class each), then the
    unlabeled features, then the queries. Edge weights are
    ``exp(-(1 - cos)^2 / (2 sigma^2))`` with no self-loops, symmetrically
    normalized. Query rows whose propagated mass underflows fall back to the
    direct cosine classifier with a :class:`DisconnectedVertexWarning`.
    """
    W = _np(weights.joint).T
    U = _np(unlabeled_features).reshape(-1, W.shape[1])
    Q = _np(query_features).reshape(-1, W.shape[1])
    C, n_q = len(W), len(Q)
    if C == 0 or n_q == 0:
        raise ValidationError("label propagation needs labeled and query vertices")
    V = _unit_rows(np.concatenate([W, U, Q]))
    dist = 1.0 - V @ V.T
    A = np.exp(-(dist ** 2) / (2 * cfg.bandwidth ** 2))
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    S = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    Y = np.zeros((len(V), C))
    Y[np.arange(C), np.arange(C)] = 1.0
    lam = cfg.damping
    Fm = Y.copy()
    for _ in range(cfg.iterations):
        Fm = lam * (S @ Fm) + (1 - lam) * Y
    out = Fm[-n_q:]
    mass = out.sum(axis=1, keepdims=True)
    dead = mass[:, 0] <= np.finfo(np.float64).tiny
    probs = np.zeros_like(out)
    probs[~dead] = out[~dead] / mass[~dead]
    if dead.any():
        warnings.warn(f"{int(dead.sum())} query vertices disconnected; using cosine classifier",
                      DisconnectedVertexWarning)
        probs[dead] = cosine_classify(as_tensor(Q[dead]), as_tensor(W.T), gamma).numpy()
    return probs


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def fixmatch_consistency_loss(weak_probs: torch.Tensor, strong_probs: torch.Tensor, threshold: float) -> torch.Tensor:
    """Cross-entropy of strong-view predictions on confident weak-view pseudo-labels.

    Averaged over the whole batch; unconfident rows contribute zero.
    """
    conf, pseudo = weak_probs.detach().max(dim=1)
    mask = (conf >= threshold).to(strong_probs.dtype)
    picked = strong_probs.gather(1, pseudo.view(-1, 1)).squeeze(1)
    return -(mask * torch.log(picked.clamp_min(LOG_EPS))).mean()


def fixmatch_adapt(model: IncrementalCosineModel, episode: Episode, cfg: FixMatchConfig,
                   rng: np.random.Generator | None = None) -> IncrementalCosineModel:
    """Adapt a copy of ``model`` with support cross-entropy plus pseudo-label consistency."""
    n_u = len(episode.unlabeled_X)
    if n_u == 0:
        raise ValidationError("FixMatch adaptation needs a non-empty unlabeled set")
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, episode.index])
    student = copy.deepcopy(model)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    B = min(cfg.batch_size, n_u)
    for _ in range(cfg.steps):
        s_feats = student(episode.support_X)
        protos = compute_prototypes(s_feats, episode.support_y, episode.n_base, episode.n_way)
        W = torch.cat([student.base_weight, protos], dim=1)
        loss = cfg.supervised_weight * cross_entropy_loss(
            cosine_classify(s_feats, W, student.gamma), episode.support_y - 1)
        batch = episode.unlabeled_X[rng.choice(n_u, size=B, replace=False)]
        weak, _ = make_views(batch, cfg.weak, rng)
        strong, _ = make_views(batch, cfg.strong, rng)
        with torch.no_grad():
            weak_probs = cosine_classify(student(weak), W, student.gamma)
        strong_probs = cosine_classify(student(strong), W, student.gamma)
        loss = loss + cfg.consistency_weight * fixmatch_consistency_loss(weak_probs, strong_probs, cfg.threshold)
        if not loss.requires_grad or loss.item() == 0.0:
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
    return student


@torch.no_grad()
def run_plain_pr(model: IncrementalCosineModel, episode: Episode, cfg: RefinementConfig,
                 refine: bool = True) -> EpisodeMetrics:
    """Score an episode with prototypes refined at test time only."""
    protos = compute_prototypes(model(episode.support_X), episode.support_y, episode.n_base, episode.n_way)
    weights = model.weights(protos)
    if refine and len(episode.unlabeled_X):
        weights = refine_loop(model, weights, episode, cfg)
    pj = cosine_classify(model(episode.query_X), weights, model.gamma)
    pb, pn = restricted_predictions(pj, episode.n_base)
    return score_episode(pj, pb, pn, episode)
