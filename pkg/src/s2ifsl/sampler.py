"""Deterministic episode construction.

Every draw uses its own generator keyed by ``(stream_seed, index, purpose)``,
so episode ``i`` can be rebuilt without replaying ``0..i-1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .types import DatasetBundle, Episode, EpisodeSpec, Mode, Split, ValidationError, relabel_novel

__all__ = [
    "SamplingError",
    "SamplerConfig",
    "episode_rng",
    "split_by_ratio",
    "sample_incremental_episode",
    "sample_fake_unlabeled_episode",
    "sample_test_episode",
    "episode_from_record",
    "dumps_episode",
]

_PURPOSE = {"classes": 0, "novel": 1, "base": 2}


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    ratio_base_to_novel_unlabeled: tuple[int, int] = (1, 1)
    stream_seed: int = 0

    def __post_init__(self):
        rb, rn = self.ratio_base_to_novel_unlabeled
        if rb < 0 or rn < 0:
            raise ValidationError("unlabeled ratio components must be non-negative")
        if self.spec.mode is Mode.SEMI_SUPERVISED and rb == 0 and rn == 0:
            raise ValidationError("unlabeled ratio (0, 0) is invalid in semi-supervised mode")
        object.__setattr__(self, "ratio_base_to_novel_unlabeled", (int(rb), int(rn)))

    def with_spec(self, **changes) -> "SamplerConfig":
        return SamplerConfig(self.spec.replace(**changes), self.ratio_base_to_novel_unlabeled,
                             self.stream_seed)


def episode_rng(stream_seed: int, index: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([int(stream_seed) & (2**64 - 1), int(index), _PURPOSE[purpose]])


def split_by_ratio(total: int, ratio: tuple[int, int]) -> tuple[int, int]:
    """Split ``total`` unlabeled samples into ``(n_base, n_novel)`` counts."""
    rb, rn = ratio
    if rb + rn == 0:
        raise SamplingError("ratio (0, 0) cannot split unlabeled samples")
    n_novel = int(round(total * rn / (rb + rn)))
    return total - n_novel, n_novel


def _per_class(total: int, n_way: int) -> list[int]:
    q, r = divmod(total, n_way)
    return [q + (1 if j < r else 0) for j in range(n_way)]


def _draw(bundle: DatasetBundle, cfg: SamplerConfig, index: int, stage: str,
          n_unl_novel: int, n_unl_base: int, mode: Mode) -> Episode:
    spec = cfg.spec
    novel_split, base_split = bundle.pools(stage)
    n_base = bundle.n_base
    classes = np.array(sorted(novel_split.classes), dtype=np.int64)
    if len(classes) < spec.n_way:
        raise SamplingError(
            f"{stage} novel split has {len(classes)} classes, need {spec.n_way}")

    rng_cls = episode_rng(cfg.stream_seed, index, "classes")
    chosen = np.sort(rng_cls.choice(classes, size=spec.n_way, replace=False))
    _, label_map = relabel_novel(chosen, n_base)

    q_counts = _per_class(spec.n_query_novel, spec.n_way)
    u_counts = _per_class(n_unl_novel, spec.n_way)
    rng_novel = episode_rng(cfg.stream_seed, index, "novel")
    sup, qn, un = [], [], []
    for j, c in enumerate(chosen):
        pool = novel_split.indices_of(c)
        need = spec.k_shot + q_counts[j] + u_counts[j]
        if len(pool) < need:
            raise SamplingError(
                f"class {int(c)} in novel_{stage} has {len(pool)} examples, need {need}")
        perm = pool[rng_novel.permutation(len(pool))]
        sup.append(perm[:spec.k_shot])
        qn.append(perm[spec.k_shot:spec.k_shot + q_counts[j]])
        un.append(perm[spec.k_shot + q_counts[j]:need])
    sup = np.concatenate(sup)
    qn = np.concatenate(qn) if qn else np.empty(0, np.int64)
    un = np.concatenate(un) if un else np.empty(0, np.int64)

    need_base = spec.n_query_base + n_unl_base
    if need_base > len(base_split):
        raise SamplingError(f"base_{stage} has {len(base_split)} examples, need {need_base}")
    rng_base = episode_rng(cfg.stream_seed, index, "base")
    perm_b = rng_base.permutation(len(base_split))
    qb = perm_b[:spec.n_query_base]
    ub = perm_b[spec.n_query_base:need_base]

    def relabel(idx):
        return np.array([label_map[int(c)] for c in novel_split.y[idx]], dtype=np.int64)

    query_X = np.concatenate([novel_split.X[qn], base_split.X[qb]])
    query_y = np.concatenate([relabel(qn), base_split.y[qb]])
    if mode is Mode.TRANSDUCTIVE:
        unl_X, unl_y = query_X, query_y
    else:
        unl_X = np.concatenate([novel_split.X[un], base_split.X[ub]])
        unl_y = np.concatenate([relabel(un), base_split.y[ub]])
    for a in (query_X, query_y, unl_X, unl_y):
        a.setflags(write=False)

    return Episode(
        spec=spec.replace(mode=mode, n_unlabeled_novel=n_unl_novel, n_unlabeled_base=n_unl_base),
        n_base=n_base,
        label_map=label_map,
        support_X=novel_split.X[sup],
        support_y=relabel(sup),
        query_X=query_X,
        query_y=query_y,
        unlabeled_X=unl_X,
        _unlabeled_y=unl_y,
        index=int(index),
        stage=stage,
        sources={"support": sup, "query_novel": qn, "query_base": qb,
                 "unlabeled_novel": un, "unlabeled_base": ub},
    )


def sample_incremental_episode(bundle: DatasetBundle, cfg: SamplerConfig, index: int,
                               stage: str = "train") -> Episode:
    """Support + novel/base query with no unlabeled set."""
    return _draw(bundle, cfg, index, stage, 0, 0, Mode.INDUCTIVE)


def sample_fake_unlabeled_episode(bundle: DatasetBundle, cfg: SamplerConfig, index: int,
                                  stage: str = "train") -> Episode:
    """Incremental episode plus an unlabeled set drawn from the same labeled pools.

    The unlabeled labels stay hidden behind the episode's oracle guard.
    """
    spec = cfg.spec
    if spec.mode is Mode.SEMI_SUPERVISED and spec.n_unlabeled_novel + spec.n_unlabeled_base == 0:
        raise SamplingError("semi-supervised episode requested with zero unlabeled samples")
    mode = Mode.SEMI_SUPERVISED if spec.n_unlabeled_novel + spec.n_unlabeled_base else Mode.INDUCTIVE
    return _draw(bundle, cfg, index, stage, spec.n_unlabeled_novel, spec.n_unlabeled_base, mode)


def sample_test_episode(bundle: DatasetBundle, cfg: SamplerConfig, index: int,
                        stage: str = "test") -> Episode:
    """Evaluation episode from the test (or val) splits in the template's mode.

    In semi-supervised mode the template's total unlabeled count is divided
    between base and novel pools by ``cfg.ratio_base_to_novel_unlabeled``.
    """
    spec = cfg.spec
    if spec.mode is Mode.SEMI_SUPERVISED:
        total = spec.n_unlabeled_novel + spec.n_unlabeled_base
        if total == 0:
            raise SamplingError("semi-supervised episode requested with zero unlabeled samples")
        n_b, n_n = split_by_ratio(total, cfg.ratio_base_to_novel_unlabeled)
        return _draw(bundle, cfg, index, stage, n_n, n_b, Mode.SEMI_SUPERVISED)
    if spec.mode is Mode.TRANSDUCTIVE:
        return _draw(bundle, cfg, index, stage, 0, 0, Mode.TRANSDUCTIVE)
    return _draw(bundle, cfg, index, stage, 0, 0, Mode.INDUCTIVE)


def episode_from_record(bundle: DatasetBundle, record: dict) -> Episode:
    """Rebuild an episode from :meth:`Episode.to_record` output."""
    spec = EpisodeSpec(**record["spec"])
    stage = record["stage"]
    novel_split, base_split = bundle.pools(stage)
    label_map = {int(k): int(v) for k, v in record["label_map"].items()}
    src = {k: np.asarray(v, dtype=np.int64) for k, v in record["sources"].items()}

    def rel(split: Split, idx):
        return np.array([label_map.get(int(c), int(c)) for c in split.y[idx]], dtype=np.int64)

    query_X = np.concatenate([novel_split.X[src["query_novel"]], base_split.X[src["query_base"]]])
    query_y = np.concatenate([rel(novel_split, src["query_novel"]), base_split.y[src["query_base"]]])
    if spec.mode is Mode.TRANSDUCTIVE:
        unl_X, unl_y = query_X, query_y
    else:
        unl_X = np.concatenate([novel_split.X[src["unlabeled_novel"]], base_split.X[src["unlabeled_base"]]])
        unl_y = np.concatenate([rel(novel_split, src["unlabeled_novel"]),
                                base_split.y[src["unlabeled_base"]]])
    return Episode(spec=spec, n_base=int(record["n_base"]), label_map=label_map,
                   support_X=novel_split.X[src["support"]], support_y=rel(novel_split, src["support"]),
                   query_X=query_X, query_y=query_y, unlabeled_X=unl_X, _unlabeled_y=unl_y,
                   index=int(record["index"]), stage=stage, sources=src)


def dumps_episode(episode: Episode) -> str:
    return json.dumps(episode.to_record(), sort_keys=True)
