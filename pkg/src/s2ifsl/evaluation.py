"""Episode scoring, multi-episode aggregation and results files."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .sampler import SamplerConfig, sample_test_episode
from .types import DatasetBundle, Episode, ValidationError

__all__ = [
    "METRIC_NAMES",
    "EpisodeMetrics",
    "AggregateReport",
    "restricted_predictions",
    "score_episode",
    "aggregate",
    "evaluate",
    "ratio_sweep",
    "write_results",
    "read_results",
]

METRIC_NAMES = ("acc_all_all", "acc_b_all", "acc_n_all", "acc_b_b", "acc_n_n", "delta_b", "delta_n", "delta")
Z_95 = 1.96


@dataclass(frozen=True)
class EpisodeMetrics:
    acc_all_all: float
    acc_b_all: float
    acc_n_all: float
    acc_b_b: float
    acc_n_n: float
    delta_b: float
    delta_n: float
    delta: float

    @classmethod
    def from_accuracies(cls, acc_b_all, acc_n_all, acc_b_b, acc_n_n, acc_all_all=None) -> "EpisodeMetrics":
        """Derive the degradation metrics; ``acc_all_all`` defaults to the balanced-query mean."""
        delta_b = acc_b_all - acc_b_b
        delta_n = acc_n_all - acc_n_n
        if acc_all_all is None:
            acc_all_all = (acc_b_all + acc_n_all) / 2
        return cls(acc_all_all, acc_b_all, acc_n_all, acc_b_b, acc_n_n,
                   delta_b, delta_n, (delta_b + delta_n) / 2)

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_NAMES]


@dataclass(frozen=True)
class AggregateReport:
    mean: dict
    ci95: dict
    n_episodes: int
    stream_seed: int = 0
    config_hash: str = ""

    def percent(self, name: str) -> tuple[float, float]:
        return 100 * self.mean[name], 100 * self.ci95[name]


def _np(p) -> np.ndarray:
    return p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)


def restricted_predictions(preds_joint, n_base: int) -> tuple[np.ndarray, np.ndarray]:
    """Renormalized base-only and novel-only blocks of a joint prediction matrix."""
    p = _np(preds_joint)
    base, novel = p[:, :n_base], p[:, n_base:]
    with np.errstate(invalid="ignore", divide="ignore"):
        base = base / base.sum(axis=1, keepdims=True)
        novel = novel / novel.sum(axis=1, keepdims=True)
    return np.nan_to_num(base), np.nan_to_num(novel)


def _mean_or_nan(x: np.ndarray) -> float:
    return float(x.mean()) if len(x) else float("nan")


def score_episode(preds_joint, preds_base_only, preds_novel_only, episode: Episode) -> EpisodeMetrics:
    """Five accuracies plus the degradation metrics for one episode's queries.

    Ties in argmax resolve to the lowest class index.
    """
    if preds_base_only is None or preds_novel_only is None:
        raise ValidationError("restricted base-only and novel-only predictions are required")
    pj, pb, pn = _np(preds_joint), _np(preds_base_only), _np(preds_novel_only)
    y = np.asarray(episode.query_y)
    n_q, n_base = len(y), episode.n_base
    for name, p, cols in (("joint", pj, n_base + episode.n_way), ("base-only", pb, n_base),
                          ("novel-only", pn, episode.n_way)):
        if p.shape != (n_q, cols):
            raise ValidationError(f"{name} predictions have shape {p.shape}, expected {(n_q, cols)}")
    is_novel = y > n_base
    hit_joint = pj.argmax(axis=1) + 1 == y
    hit_base = pb.argmax(axis=1) + 1 == y
    hit_novel = pn.argmax(axis=1) + n_base + 1 == y
    return EpisodeMetrics.from_accuracies(
        acc_b_all=_mean_or_nan(hit_joint[~is_novel]),
        acc_n_all=_mean_or_nan(hit_joint[is_novel]),
        acc_b_b=_mean_or_nan(hit_base[~is_novel]),
        acc_n_n=_mean_or_nan(hit_novel[is_novel]),
        acc_all_all=_mean_or_nan(hit_joint),
    )


def aggregate(metrics: Sequence[EpisodeMetrics], stream_seed: int = 0, config_hash: str = "") -> AggregateReport:
    """Per-metric mean and 95% CI half-width ``1.96 * s / sqrt(E)`` (NaN when E == 1)."""
    if len(metrics) == 0:
        raise ValidationError("cannot aggregate an empty list of episodes")
    table = np.array([m.as_row() for m in metrics], dtype=np.float64)
    E = len(table)
    mean = table.mean(axis=0)
    if E > 1:
        half = Z_95 * table.std(axis=0, ddof=1) / math.sqrt(E)
    else:
        half = np.full(table.shape[1], np.nan)
    return AggregateReport(dict(zip(METRIC_NAMES, map(float, mean))),
                           dict(zip(METRIC_NAMES, map(float, half))), E, stream_seed, config_hash)


PredictFn = Callable[[Episode], object]


def evaluate(predict: PredictFn, bundle: DatasetBundle, sampler: SamplerConfig, n_episodes: int,
             stage: str = "test", start: int = 0) -> list[EpisodeMetrics]:
    """Score ``predict`` on episodes ``start..start+n_episodes-1`` of the stream.

    ``predict`` maps an episode to the joint query prediction matrix; the
    restricted matrices are its renormalized column blocks.
    """
    out = []
    for i in range(start, start + n_episodes):
        episode = sample_test_episode(bundle, sampler, i, stage=stage)
        pj = _np(predict(episode))
        pb, pn = restricted_predictions(pj, episode.n_base)
        out.append(score_episode(pj, pb, pn, episode))
    return out


def ratio_sweep(predict: PredictFn, bundle: DatasetBundle, sampler: SamplerConfig,
                ratios: Sequence[tuple[int, int]], n_episodes: int, reference=(1, 1),
                stage: str = "test") -> list[dict]:
    """Joint accuracy per base:novel unlabeled ratio and its change vs ``reference``.

    Every ratio reuses the same episode indices (and therefore seeds).
    """
    cache = {}

    def run(ratio):
        ratio = tuple(int(r) for r in ratio)
        if ratio not in cache:
            cfg = SamplerConfig(sampler.spec, ratio, sampler.stream_seed)
            cache[ratio] = aggregate(evaluate(predict, bundle, cfg, n_episodes, stage), sampler.stream_seed)
        return cache[ratio]

    ref = run(reference).mean["acc_all_all"]
    rows = []
    for ratio in ratios:
        rep = run(ratio)
        acc = rep.mean["acc_all_all"]
        rows.append({"ratio": tuple(int(r) for r in ratio), "acc": acc, "ci95": rep.ci95["acc_all_all"],
                     "delta": acc - ref})
    return rows


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.10f}"


def write_results(path, per_method: dict[str, Sequence[EpisodeMetrics]], config_hash: str,
                  stream_seed: int) -> None:
    """One row per (method, episode), then a commented summary block per method."""
    buf = io.StringIO()
    buf.write(f"# s2ifsl-results version=1 config_hash={config_hash} stream_seed={stream_seed}\n")
    buf.write(",".join(("method", "episode") + METRIC_NAMES) + "\n")
    for method, metrics in per_method.items():
        for i, m in enumerate(metrics):
            buf.write(",".join([method, str(i)] + [_fmt(v) for v in m.as_row()]) + "\n")
    buf.write("# summary\n")
    buf.write("# " + ",".join(("method", "stat", "n_episodes") + METRIC_NAMES) + "\n")
    for method, metrics in per_method.items():
        rep = aggregate(metrics)
        for stat, vals in (("mean", rep.mean), ("ci95", rep.ci95)):
            row = [method, stat, str(rep.n_episodes)] + [_fmt(vals[k]) for k in METRIC_NAMES]
            buf.write("# " + ",".join(row) + "\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_results(path) -> tuple[dict, dict[str, list[EpisodeMetrics]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# s2ifsl-results"):
        raise ValidationError(f"{path}: not a results file")
    header = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    per_method: dict[str, list[EpisodeMetrics]] = {}
    for ln in lines[2:]:
        if ln.startswith("#"):
            continue
        parts = ln.split(",")
        vals = [float(v) for v in parts[2:]]
        per_method.setdefault(parts[0], []).append(EpisodeMetrics(*vals))
    return header, per_method
