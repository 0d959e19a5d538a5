"""Pre-training on base classes and the two episodic meta-training loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import IncrementalCosineModel, as_tensor, compute_prototypes, cosine_classify
from .refinement import RefinementConfig, refine_prototypes
from .sampler import SamplerConfig, sample_fake_unlabeled_episode, sample_incremental_episode
from .types import DatasetBundle, Episode, EpisodeSpec, Mode, ValidationError

__all__ = [
    "LOG_EPS",
    "TrainingDivergedError",
    "TrainConfig",
    "cross_entropy_loss",
    "make_optimizer",
    "pretrain",
    "episode_loss_alg1",
    "episode_loss_alg2",
    "meta_train_step_alg1",
    "meta_train_step_alg2",
    "meta_train",
    "write_training_log",
]

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


def _default_meta_sampler() -> SamplerConfig:
    return SamplerConfig(EpisodeSpec(n_way=5, k_shot=1, n_query_novel=75, n_query_base=75,
                                     n_unlabeled_novel=150, n_unlabeled_base=150,
                                     mode=Mode.SEMI_SUPERVISED), stream_seed=1)


@dataclass(frozen=True)
class TrainConfig:
    """Learning rates and schedule for one training phase.

    ``eta1`` updates the extractor (and the cosine scale), ``eta2`` the base
    weights. ``steps`` counts epochs for pre-training and episodes for
    meta-training.
    """

    eta1: float = 1e-2
    eta2: float = 1e-2
    steps: int = 2000
    batch_size: int = 128
    momentum: float = 0.0
    sampler: SamplerConfig = field(default_factory=_default_meta_sampler)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    stop_gradient_refinement: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")


def cross_entropy_loss(preds: torch.Tensor, labels) -> torch.Tensor:
    """Mean ``-log p[label]`` over rows; probabilities are clamped at ``LOG_EPS``."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) and (labels.min() < 0 or labels.max() >= preds.shape[1]):
        raise ValidationError("label index outside prediction columns")
    picked = preds.gather(1, labels.view(-1, 1)).squeeze(1)
    if (picked < LOG_EPS).any():
        log.warning("cross-entropy: %d probabilities clamped at %g", int((picked < LOG_EPS).sum()), LOG_EPS)
    return -torch.log(picked.clamp_min(LOG_EPS)).mean()


def make_optimizer(model: IncrementalCosineModel, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD([
        {"params": model.theta_parameters(), "lr": cfg.eta1},
        {"params": [model.base_weight], "lr": cfg.eta2},
    ], lr=cfg.eta1, momentum=cfg.momentum)


def _step(model, optimizer, loss):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    with torch.no_grad():
        model.gamma.clamp_(min=1e-3)


def pretrain(model: IncrementalCosineModel, bundle: DatasetBundle, cfg: TrainConfig) -> list[float]:
    """Supervised cosine-classifier training on ``base_train``.

    Runs ``cfg.steps`` epochs of shuffled mini-batches and returns the mean
    loss per epoch, preceded by the loss at initialisation.
    """
    split = bundle.base_train
    if len(split) == 0:
        raise ValidationError("base_train is empty")
    X = as_tensor(split.X)
    y = torch.as_tensor(split.y - 1, dtype=torch.long)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    with torch.no_grad():
        history = [float(cross_entropy_loss(cosine_classify(model(X), model.base_weight, model.gamma), y))]
    for epoch in range(cfg.steps):
        order = torch.as_tensor(rng.permutation(len(y)))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            preds = cosine_classify(model(X[idx]), model.base_weight, model.gamma)
            loss = cross_entropy_loss(preds, y[idx])
            _step(model, optimizer, loss)
            total += loss.item() * len(idx)
        history.append(total / len(y))
        if not math.isfinite(history[-1]):
            raise TrainingDivergedError(f"pre-training diverged at epoch {epoch}")
    return history


def _query_loss(model, episode: Episode, novel_weights: torch.Tensor, q_feats: torch.Tensor) -> torch.Tensor:
    W = torch.cat([model.base_weight, novel_weights], dim=1)
    preds = cosine_classify(q_feats, W, model.gamma)
    return cross_entropy_loss(preds, episode.query_y - 1)


def episode_loss_alg1(model: IncrementalCosineModel, episode: Episode) -> torch.Tensor:
    """Query cross-entropy against ``[W_b, prototypes]`` (no unlabeled data)."""
    feats = model(np.concatenate([episode.support_X, episode.query_X]))
    n_s = len(episode.support_y)
    protos = compute_prototypes(feats[:n_s], episode.support_y, episode.n_base, episode.n_way)
    return _query_loss(model, episode, protos, feats[n_s:])


def episode_loss_alg2(model: IncrementalCosineModel, episode: Episode, refinement: RefinementConfig,
                      stop_gradient: bool = False) -> torch.Tensor:
    """Query cross-entropy after refining prototypes with the fake unlabeled set.

    Only ``episode.unlabeled_X`` is read; the unlabeled labels are never touched.
    """
    n_s, n_q = len(episode.support_y), len(episode.query_y)
    feats = model(np.concatenate([episode.support_X, episode.query_X, episode.unlabeled_X]))
    sup, qry, unl = feats[:n_s], feats[n_s:n_s + n_q], feats[n_s + n_q:]
    protos = compute_prototypes(sup, episode.support_y, episode.n_base, episode.n_way)
    protos = refine_prototypes(model.base_weight, protos, unl, sup, episode.support_y, model.gamma,
                               refinement, stop_gradient=stop_gradient)
    return _query_loss(model, episode, protos, qry)


def meta_train_step_alg1(model: IncrementalCosineModel, bundle: DatasetBundle, cfg: TrainConfig, index: int,
                         optimizer=None) -> float:
    """Sample training episode ``index`` and take one gradient step; returns the loss."""
    episode = sample_incremental_episode(bundle, cfg.sampler, index, stage="train")
    loss = episode_loss_alg1(model, episode)
    _step(model, optimizer or make_optimizer(model, cfg), loss)
    return loss.item()


def meta_train_step_alg2(model: IncrementalCosineModel, bundle: DatasetBundle, cfg: TrainConfig, index: int,
                         optimizer=None) -> float:
    episode = sample_fake_unlabeled_episode(bundle, cfg.sampler, index, stage="train")
    loss = episode_loss_alg2(model, episode, cfg.refinement, cfg.stop_gradient_refinement)
    _step(model, optimizer or make_optimizer(model, cfg), loss)
    return loss.item()


def meta_train(model: IncrementalCosineModel, bundle: DatasetBundle, cfg: TrainConfig,
               algorithm: str = "alg2", start: int = 0, optimizer=None, losses: list | None = None,
               callback=None) -> list[float]:
    """Run meta-training episodes ``start..cfg.steps-1``; returns per-step losses.

    Episodes depend only on their index, so a run resumed from a saved model,
    optimizer state and loss list reproduces an uninterrupted one.
    ``callback(step, losses, optimizer)`` fires after every step.
    """
    step_fn = {"alg1": meta_train_step_alg1, "alg2": meta_train_step_alg2}[algorithm]
    optimizer = optimizer or make_optimizer(model, cfg)
    losses = list(losses or [])
    for i in range(start, cfg.steps):
        losses.append(step_fn(model, bundle, cfg, i, optimizer))
        if i % 500 == 0:
            log.info("meta-train %s step %d loss %.4f", algorithm, i, losses[-1])
        if callback is not None:
            callback(i + 1, losses, optimizer)
    return losses


def write_training_log(path, losses, cfg_hash: str, phase: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# phase={phase} config_hash={cfg_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "config_hash"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss)), cfg_hash])
