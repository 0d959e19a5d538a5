"""Feature extractor, cosine classification head and prototype imprinting."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import ClassifierWeights, ValidationError

__all__ = [
    "DTYPE",
    "COS_EPS",
    "IncrementalCosineModel",
    "as_tensor",
    "cosine_logits",
    "cosine_classify",
    "compute_prototypes",
    "build_joint_weights",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]

DTYPE = torch.float64
COS_EPS = 1e-12
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"elu": nn.ELU, "tanh": nn.Tanh, "silu": nn.SiLU, "softplus": nn.Softplus}


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.tensor(np.asarray(x, dtype=np.float64))


def config_hash(obj) -> str:
    """Short content hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class IncrementalCosineModel(nn.Module):
    """MLP feature extractor ``f_theta`` with learnable base weights and scale.

    ``base_weight`` is stored as ``(d, N_b)``, one column per base class.
    With ``hidden=()`` and ``d=None`` the extractor is the identity map.
    """

    def __init__(self, input_dim: int, n_base: int, hidden=(64, 64), d: int | None = 16,
                 activation: str = "elu", gamma_init: float = 10.0, seed: int = 0):
        super().__init__()
        self.input_dim = int(input_dim)
        self.n_base = int(n_base)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self._head_dim = None if d is None else int(d)
        gen = torch.Generator().manual_seed(int(seed))

        layers: list[nn.Module] = []
        width = self.input_dim
        for h in self.hidden:
            layers += [nn.Linear(width, h, dtype=DTYPE), _ACTIVATIONS[activation]()]
            width = h
        if d is not None:
            layers.append(nn.Linear(width, int(d), dtype=DTYPE))
            width = int(d)
        self.d = width
        self.extractor = nn.Sequential(*layers) if layers else nn.Identity()
        with torch.no_grad():
            for m in self.extractor.modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / np.sqrt(m.in_features)
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.uniform_(-bound, bound, generator=gen)
        self.base_weight = nn.Parameter(torch.randn(self.d, self.n_base, generator=gen, dtype=DTYPE)
                                        * np.sqrt(2.0 / self.d))
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init), dtype=DTYPE))

    def config(self) -> dict:
        return {"input_dim": self.input_dim, "n_base": self.n_base, "hidden": list(self.hidden),
                "d": self._head_dim, "activation": self.activation}

    def forward(self, x) -> torch.Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValidationError(
                f"expected inputs of shape (n, {self.input_dim}), got {tuple(x.shape)}")
        return self.extractor(x)

    extract_features = forward

    def theta_parameters(self):
        """Feature-side parameters updated with the first learning rate (includes the scale)."""
        return [*self.extractor.parameters(), self.gamma]

    def snapshot(self) -> "IncrementalCosineModel":
        return copy.deepcopy(self)

    def weights(self, novel: torch.Tensor | None = None) -> ClassifierWeights:
        return build_joint_weights(self.base_weight, novel)


def cosine_logits(features: torch.Tensor, weights: torch.Tensor, gamma) -> torch.Tensor:
    """``gamma * cos(f_i, w_k)`` with norms clamped below at ``COS_EPS``."""
    f = F.normalize(as_tensor(features), dim=1, eps=COS_EPS)
    w = F.normalize(as_tensor(weights), dim=0, eps=COS_EPS)
    return gamma * (f @ w)


def cosine_classify(features, weights, gamma) -> torch.Tensor:
    """Softmax over classes of scaled cosine similarity; rows sum to one.

    ``weights`` may be a ``(d, C)`` tensor or a :class:`ClassifierWeights`.
    """
    if isinstance(weights, ClassifierWeights):
        weights = weights.joint
    return torch.softmax(cosine_logits(features, weights, gamma), dim=1)


def compute_prototypes(features, labels, n_base: int, n_way: int) -> torch.Tensor:
    """Per-class mean of support features, returned as a ``(d, n_way)`` matrix.

    Column ``j`` holds the prototype of episode label ``n_base + 1 + j``.
    """
    features = as_tensor(features)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    cols = labels - n_base - 1
    if ((cols < 0) | (cols >= n_way)).any():
        raise ValidationError("support labels outside n_base+1..n_base+n_way")
    counts = torch.bincount(cols, minlength=n_way)
    empty = torch.nonzero(counts == 0).flatten()
    if len(empty):
        raise ValidationError(f"no support examples for episode class {n_base + 1 + int(empty[0])}")
    onehot = F.one_hot(cols, n_way).to(features.dtype)
    return (features.T @ onehot) / counts.to(features.dtype)


def build_joint_weights(base, novel=None) -> ClassifierWeights:
    base = as_tensor(base)
    novel = None if novel is None else as_tensor(novel)
    return ClassifierWeights(base, novel)


def save_checkpoint(model: IncrementalCosineModel, path, cfg_hash: str, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "s2ifsl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model.config(),
        "state_dict": model.state_dict(),
        "gamma": model.gamma.item(),
        "d": model.d,
        "config_hash": cfg_hash,
        "extra": extra or {},
    }, path)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[IncrementalCosineModel, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != "s2ifsl-checkpoint" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if expected_hash is not None and blob["config_hash"] != expected_hash:
        raise ValidationError(
            f"{path}: checkpoint config hash {blob['config_hash']} != expected {expected_hash}")
    cfg = blob["model_config"]
    model = IncrementalCosineModel(cfg["input_dim"], cfg["n_base"], hidden=cfg["hidden"], d=cfg["d"],
                                   activation=cfg["activation"])
    model.load_state_dict(blob["state_dict"])
    return model, blob
