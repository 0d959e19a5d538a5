"""Test-time adaptation of ``{f_theta, W_b}`` on one episode.

The objective mixes a support-set classification loss, a contrastive loss on
two augmented views of unlabeled samples, and a distillation loss that keeps
the student's base-class predictions close to a frozen teacher.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .model import COS_EPS, IncrementalCosineModel, as_tensor, compute_prototypes, cosine_logits
from .training import LOG_EPS, cross_entropy_loss
from .types import Episode, ValidationError

__all__ = [
    "AugmentationSpec",
    "AdaptationConfig",
    "TeacherSnapshot",
    "AdaptationResult",
    "default_pairing",
    "contrastive_loss",
    "softened_base_predictions",
    "distillation_loss",
    "make_views",
    "adapt_model",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationSpec:
    """Vector-space augmentation: additive Gaussian noise then coordinate masking."""

    noise_std: float = 0.1
    mask_rate: float = 0.1

    def __post_init__(self):
        if self.noise_std < 0 or not 0.0 <= self.mask_rate <= 1.0:
            raise ValidationError("noise_std must be >= 0 and mask_rate in [0, 1]")


@dataclass(frozen=True)
class AdaptationConfig:
    w_cls: float = 1.0
    w_ctr: float = 0.5
    w_dst: float = 1.0
    tau1: float = 0.5
    tau2: float = 4.0
    batch_size: int = 64
    steps: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    classify_all_classes: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValidationError("temperatures must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if min(self.w_cls, self.w_ctr, self.w_dst) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


class TeacherSnapshot:
    """Frozen copy of the meta-trained extractor, base weights and scale."""

    def __init__(self, model: IncrementalCosineModel):
        net = copy.deepcopy(model)
        for p in net.parameters():
            p.requires_grad_(False)
        self._net = net

    @property
    def theta_bar(self) -> dict:
        return {k: v for k, v in self._net.extractor.state_dict().items()}

    @property
    def W_b_bar(self) -> torch.Tensor:
        return self._net.base_weight

    @property
    def gamma(self) -> torch.Tensor:
        return self._net.gamma

    def features(self, x) -> torch.Tensor:
        return self._net(x)


@dataclass
class AdaptationResult:
    model: IncrementalCosineModel
    losses: list = field(default_factory=list)
    incident: str | None = None


def default_pairing(batch_size: int) -> torch.Tensor:
    """Pairing for views stacked as ``[view_a; view_b]``: ``i <-> i + B``."""
    B = int(batch_size)
    return torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)])


def contrastive_loss(view_features: torch.Tensor, pairing, tau1: float) -> torch.Tensor:
    """Normalized-temperature cross-entropy over ``2B`` view features.

    ``pairing[i]`` is the index of the positive partner of row ``i``; it must
    be an involution without fixed points.
    """
    feats = as_tensor(view_features)
    n = feats.shape[0]
    if n == 0:
        raise ValidationError("contrastive loss needs a non-empty batch")
    pairing = torch.as_tensor(np.asarray(pairing), dtype=torch.long)
    idx = torch.arange(n)
    if len(pairing) != n or (pairing == idx).any() or (pairing[pairing] != idx).any():
        raise ValidationError("pairing must be a fixed-point-free involution over all views")
    z = F.normalize(feats, dim=1, eps=COS_EPS)
    sim = (z @ z.T) / tau1
    sim = sim.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    return -log_prob[idx, pairing].mean()


def softened_base_predictions(features, base_weight, gamma, tau2: float) -> torch.Tensor:
    """Softmax over base classes of ``gamma * cos / tau2``."""
    return torch.softmax(cosine_logits(features, base_weight, gamma) / tau2, dim=1)


def distillation_loss(inputs, student: IncrementalCosineModel, teacher: TeacherSnapshot,
                      tau2: float) -> torch.Tensor:
    """``-mean_i sum_k zbar_ik log z_ik`` with each model using its own scale."""
    if student.n_base != teacher.W_b_bar.shape[1] or student.d != teacher.W_b_bar.shape[0]:
        raise ValidationError("student and teacher disagree on d or N_b")
    with torch.no_grad():
        z_bar = softened_base_predictions(teacher.features(inputs), teacher.W_b_bar, teacher.gamma, tau2)
    z = softened_base_predictions(student(inputs), student.base_weight, student.gamma, tau2)
    if (z < LOG_EPS).any():
        log.warning("distillation: student probabilities clamped at %g", LOG_EPS)
    return -(z_bar * torch.log(z.clamp_min(LOG_EPS))).sum(dim=1).mean()


def make_views(sample, spec: AugmentationSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent noisy, masked copies of ``sample`` (a vector or a batch)."""
    x = np.asarray(sample, dtype=np.float64)
    views = []
    for _ in range(2):
        noise = rng.standard_normal(x.shape) * spec.noise_std
        keep = rng.random(x.shape) >= spec.mask_rate
        views.append((x + noise) * keep)
    return views[0], views[1]


def _support_loss(model: IncrementalCosineModel, episode: Episode, all_classes: bool) -> torch.Tensor:
    feats = model(episode.support_X)
    protos = compute_prototypes(feats, episode.support_y, episode.n_base, episode.n_way)
    if all_classes:
        W = torch.cat([model.base_weight, protos], dim=1)
        target = episode.support_y - 1
    else:
        W = protos
        target = episode.support_y - episode.n_base - 1
    preds = torch.softmax(cosine_logits(feats, W, model.gamma), dim=1)
    return cross_entropy_loss(preds, target)


def adapt_model(model: IncrementalCosineModel, episode: Episode, cfg: AdaptationConfig,
                rng: np.random.Generator | None = None) -> AdaptationResult:
    """Adapt a copy of ``model`` to ``episode``; the input model is left untouched.

    A non-finite loss aborts adaptation and returns the unadapted model with
    the incident recorded.
    """
    if len(episode.support_y) == 0:
        raise ValidationError("adaptation needs a non-empty support set")
    n_u = len(episode.unlabeled_X)
    if n_u == 0 and (cfg.w_ctr > 0 or cfg.w_dst > 0):
        raise ValidationError("contrastive/distillation terms need a non-empty unlabeled set")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, episode.index])
    teacher = TeacherSnapshot(model)
    student = copy.deepcopy(model)
    params = list(student.parameters())
    opt = (torch.optim.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam"
           else torch.optim.SGD(params, lr=cfg.lr))
    B = min(cfg.batch_size, n_u) if n_u else 0
    result = AdaptationResult(student)
    for step in range(cfg.steps):
        terms = {}
        loss = _support_loss(student, episode, cfg.classify_all_classes) * cfg.w_cls
        terms["cls"] = loss.item()
        if B:
            batch = episode.unlabeled_X[rng.choice(n_u, size=B, replace=False)]
            if cfg.w_ctr > 0 and B > 1:
                a, b = make_views(batch, cfg.augmentation, rng)
                ctr = contrastive_loss(student(np.concatenate([a, b])), default_pairing(B), cfg.tau1)
                loss = loss + cfg.w_ctr * ctr
                terms["ctr"] = ctr.item()
            if cfg.w_dst > 0:
                dst = distillation_loss(batch, student, teacher, cfg.tau2)
                loss = loss + cfg.w_dst * dst
                terms["dst"] = dst.item()
        if not torch.isfinite(loss):
            msg = f"episode {episode.index}: non-finite adaptation loss at step {step}; using unadapted model"
            log.warning(msg)
            return AdaptationResult(copy.deepcopy(model), result.losses, incident=msg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            student.gamma.clamp_(min=1e-3)
        result.losses.append(terms)
    return result
