"""Episode predictors for every evaluated method.

A predictor maps an :class:`Episode` to the ``(n_q, N_b + N)`` joint
prediction matrix over its queries.
"""
from __future__ import annotations

import dataclasses

import torch

from .adaptation import AdaptationConfig, adapt_model
from .baselines import FixMatchConfig, GraphConfig, fixmatch_adapt, label_propagation_predict
from .model import IncrementalCosineModel, compute_prototypes, cosine_classify
from .refinement import RefinementConfig, refine_loop
from .types import Episode

__all__ = ["imprint", "baseline_predictor", "refined_predictor", "adapted_predictor",
           "graph_predictor", "fixmatch_predictor"]


@torch.no_grad()
def imprint(model: IncrementalCosineModel, episode: Episode):
    protos = compute_prototypes(model(episode.support_X), episode.support_y, episode.n_base, episode.n_way)
    return model.weights(protos)


def baseline_predictor(model: IncrementalCosineModel):
    @torch.no_grad()
    def predict(episode: Episode):
        return cosine_classify(model(episode.query_X), imprint(model, episode), model.gamma)
    return predict


def _refined(model, episode, cfg):
    weights = imprint(model, episode)
    if len(episode.unlabeled_X):
        weights = refine_loop(model, weights, episode, cfg)
    with torch.no_grad():
        return cosine_classify(model(episode.query_X), weights, model.gamma)


def refined_predictor(model: IncrementalCosineModel, cfg: RefinementConfig):
    """Imprint prototypes, refine them with the unlabeled set, classify queries."""
    return lambda episode: _refined(model, episode, cfg)


def adapted_predictor(model: IncrementalCosineModel, adapt_cfg: AdaptationConfig,
                      refine_cfg: RefinementConfig | None, incidents: list | None = None):
    """Adapt on the episode, re-imprint from adapted features, then (optionally) refine.

    Without unlabeled data only the support term is optimised.
    """
    support_only = dataclasses.replace(adapt_cfg, w_ctr=0.0, w_dst=0.0)

    def predict(episode: Episode):
        cfg = adapt_cfg if len(episode.unlabeled_X) else support_only
        result = adapt_model(model, episode, cfg)
        if result.incident and incidents is not None:
            incidents.append(result.incident)
        adapted = result.model
        if refine_cfg is None:
            return baseline_predictor(adapted)(episode)
        return _refined(adapted, episode, refine_cfg)
    return predict


def graph_predictor(model: IncrementalCosineModel, cfg: GraphConfig):
    @torch.no_grad()
    def predict(episode: Episode):
        weights = imprint(model, episode)
        unl = episode.unlabeled_X[:0] if episode.unlabeled_is_query else episode.unlabeled_X
        return label_propagation_predict(weights, model(unl), model(episode.query_X), cfg,
                                         gamma=model.gamma.item())
    return predict


def fixmatch_predictor(model: IncrementalCosineModel, cfg: FixMatchConfig):
    """FixMatch-adapted model; falls back to the unadapted one when U is empty."""
    def predict(episode: Episode):
        if not len(episode.unlabeled_X):
            return baseline_predictor(model)(episode)
        return baseline_predictor(fixmatch_adapt(model, episode, cfg))(episode)
    return predict
