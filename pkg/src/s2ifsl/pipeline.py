"""Stage orchestration: synth -> pretrain -> metatrain -> evaluate / ablate / sweep -> report.

Every artifact lives under ``cfg.output_dir`` and carries the config hash.
Stages pull in missing prerequisites, skip work whose artifact already exists
with a matching hash, and refuse to read artifacts stamped with another hash.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .evaluation import (METRIC_NAMES, AggregateReport, aggregate, evaluate, read_results, write_results)
from .methods import (adapted_predictor, baseline_predictor, fixmatch_predictor, graph_predictor, imprint,
                      refined_predictor)
from .model import IncrementalCosineModel, load_checkpoint, save_checkpoint
from .refinement import refine_loop
from .sampler import SamplerConfig, sample_test_episode
from .synthetic import synthesize_dataset
from .training import make_optimizer, meta_train, pretrain, write_training_log
from .types import DatasetBundle, Mode, ValidationError, load_bundle, read_bundle_header, save_bundle, \
    validate_bundle

__all__ = ["STAGES", "HashMismatchError", "RunLayout", "stage_synth", "stage_pretrain", "stage_metatrain",
           "stage_evaluate", "stage_ablate", "stage_sweep", "stage_report", "run_pipeline", "load_model",
           "ABLATION_ROWS"]

log = logging.getLogger(__name__)

STAGES = ("synth", "pretrain", "metatrain", "evaluate", "ablate", "sweep", "report")
ALGORITHMS = ("alg1", "alg2")
ABLATION_ROWS = ("baseline", "+PR", "+fake-unlabeled", "+adaptation")


class HashMismatchError(ValidationError):
    pass


class RunLayout:
    """File locations inside one run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = cfg.hash
        self.root = Path(cfg.output_dir)

    config = property(lambda self: self.root / "config.yaml")
    bundle = property(lambda self: self.root / "data" / "bundle.csv")

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.pt"

    def loss_log(self, name: str) -> Path:
        return self.root / "logs" / f"{name}_loss.csv"

    def results(self, name: str) -> Path:
        return self.root / "results" / f"{name}.csv"

    def table(self, name: str) -> Path:
        return self.root / "tables" / f"{name}.csv"

    def plot(self, name: str) -> Path:
        return self.root / "plots" / f"{name}.png"

    def init(self) -> None:
        """Create the run directory, or verify an existing one belongs to this config."""
        if self.config.exists():
            stamped = self.config.read_text().splitlines()[0].partition("config_hash=")[2]
            if stamped != self.hash:
                raise HashMismatchError(
                    f"{self.root} holds a run with config hash {stamped}, not {self.hash}; "
                    "use a fresh output directory")
            return
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.config)

    def check(self, found: str, path: Path) -> None:
        if found != self.hash:
            raise HashMismatchError(f"{path}: config hash {found} does not match the run's {self.hash}")


def _layout(cfg: ExperimentConfig) -> RunLayout:
    layout = RunLayout(cfg)
    layout.init()
    return layout


# --- data and models --------------------------------------------------------


def stage_synth(cfg: ExperimentConfig) -> Path:
    """Materialise the dataset bundle (synthesised or copied from ``bundle_path``)."""
    lay = _layout(cfg)
    if lay.bundle.exists():
        lay.check(read_bundle_header(lay.bundle).get("config_hash", ""), lay.bundle)
        return lay.bundle
    if cfg.bundle_path:
        bundle = load_bundle(cfg.bundle_path)
    else:
        bundle = synthesize_dataset(cfg.data, cfg.data_seed)
    problems = validate_bundle(bundle)
    if problems:
        raise ValidationError("invalid dataset bundle:\n  " + "\n  ".join(problems))
    lay.bundle.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, lay.bundle, meta={"config_hash": lay.hash})
    return lay.bundle


def load_run_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    lay = RunLayout(cfg)
    path = stage_synth(cfg)
    lay.check(read_bundle_header(path).get("config_hash", ""), path)
    return load_bundle(path)


def _new_model(cfg: ExperimentConfig, bundle: DatasetBundle) -> IncrementalCosineModel:
    m = cfg.model
    return IncrementalCosineModel(bundle.dim, bundle.n_base, hidden=m.hidden, d=m.d, activation=m.activation,
                                  gamma_init=m.gamma_init, seed=m.seed)


def load_model(cfg: ExperimentConfig, name: str) -> IncrementalCosineModel:
    lay = RunLayout(cfg)
    model, _ = load_checkpoint(lay.checkpoint(name), expected_hash=lay.hash)
    model.eval()
    return model


def stage_pretrain(cfg: ExperimentConfig) -> Path:
    lay = _layout(cfg)
    path = lay.checkpoint("pretrained")
    if path.exists():
        load_checkpoint(path, expected_hash=lay.hash)
        return path
    bundle = load_run_bundle(cfg)
    model = _new_model(cfg, bundle)
    history = pretrain(model, bundle, cfg.pretrain)
    write_training_log(lay.loss_log("pretrain"), history, lay.hash, "pretrain")
    save_checkpoint(model, path, lay.hash, {"phase": "pretrain"})
    return path


def stage_metatrain(cfg: ExperimentConfig, algorithm: str) -> Path:
    """Meta-train from the pre-trained checkpoint; resumes from a partial checkpoint if one exists."""
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    lay = _layout(cfg)
    path = lay.checkpoint(algorithm)
    if path.exists():
        load_checkpoint(path, expected_hash=lay.hash)
        return path
    bundle = load_run_bundle(cfg)
    stage_pretrain(cfg)
    partial = lay.checkpoint(f"{algorithm}.partial")
    if partial.exists():
        model, blob = load_checkpoint(partial, expected_hash=lay.hash)
        optimizer = make_optimizer(model, cfg.metatrain)
        optimizer.load_state_dict(blob["extra"]["optimizer"])
        start, losses = blob["extra"]["step"], blob["extra"]["losses"]
        log.info("resuming %s at step %d", algorithm, start)
    else:
        model, _ = load_checkpoint(lay.checkpoint("pretrained"), expected_hash=lay.hash)
        optimizer, start, losses = None, 0, []

    def save_partial(step, losses, optimizer):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.metatrain.steps:
            save_checkpoint(model, partial, lay.hash, {"phase": algorithm, "step": step, "losses": list(losses),
                                                       "optimizer": optimizer.state_dict()})

    losses = meta_train(model, bundle, cfg.metatrain, algorithm, start=start, optimizer=optimizer,
                        losses=losses, callback=save_partial)
    write_training_log(lay.loss_log(f"metatrain_{algorithm}"), losses, lay.hash, f"metatrain-{algorithm}")
    save_checkpoint(model, path, lay.hash, {"phase": algorithm, "step": cfg.metatrain.steps})
    partial.unlink(missing_ok=True)
    return path


# --- evaluation ---------------------------------------------------------------


def _predictor(cfg: ExperimentConfig, model: IncrementalCosineModel, method: str):
    if method == "baseline":
        return baseline_predictor(model)
    if method == "pr":
        return refined_predictor(model, cfg.refinement)
    if method == "adapt":
        return adapted_predictor(model, cfg.adaptation, cfg.refinement)
    if method == "graph":
        return graph_predictor(model, cfg.graph)
    if method == "fixmatch":
        return fixmatch_predictor(model, cfg.fixmatch)
    raise ValidationError(f"unknown method {method!r}")


def _score(cfg, bundle, predict, sampler: SamplerConfig):
    return evaluate(predict, bundle, sampler, cfg.evaluation.n_episodes)


def _read_checked(lay: RunLayout, path: Path):
    header, per_method = read_results(path)
    lay.check(header.get("config_hash", ""), path)
    return header, per_method


def stage_evaluate(cfg: ExperimentConfig, algorithm: str = "alg2", mode: str | Mode | None = None,
                   methods=None, force: bool = False) -> Path:
    """Score ``methods`` (default: the config's list) with a meta-trained checkpoint."""
    mode = Mode(mode) if mode is not None else cfg.evaluation.episode.mode
    methods = tuple(methods or cfg.evaluation.methods)
    lay = _layout(cfg)
    path = lay.results(f"eval_{algorithm}_{mode.value}")
    if path.exists() and not force:
        header, per_method = _read_checked(lay, path)
        if set(methods) <= {m.split("+", 1)[1] for m in per_method}:
            return path
    bundle = load_run_bundle(cfg)
    stage_metatrain(cfg, algorithm)
    model = load_model(cfg, algorithm)
    sampler = cfg.evaluation.sampler(mode)
    per_method = {f"{algorithm}+{m}": _score(cfg, bundle, _predictor(cfg, model, m), sampler) for m in methods}
    write_results(path, per_method, lay.hash, sampler.stream_seed)
    return path


def _summary_rows(per_method: dict) -> list[list[str]]:
    rows = []
    for method, metrics in per_method.items():
        rep = aggregate(metrics)
        rows.append([method, str(rep.n_episodes)]
                    + [f"{100 * rep.mean[k]:.2f}" for k in METRIC_NAMES]
                    + [f"{100 * rep.ci95[k]:.2f}" for k in METRIC_NAMES])
    return rows


def _write_table(path: Path, header: list[str], rows: list[list[str]], cfg_hash: str, stream_seed: int):
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg_hash} stream_seed={stream_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _read_table(lay: RunLayout, path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    lay.check(lines[0].partition("config_hash=")[2].split()[0], path)
    return list(csv.DictReader(lines[1:]))


def stage_ablate(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Baseline / +PR / +fake-unlabeled / +adaptation on the configured test stream."""
    lay = _layout(cfg)
    path = lay.results("ablation")
    if path.exists() and not force:
        _read_checked(lay, path)
        return path
    bundle = load_run_bundle(cfg)
    for alg in ALGORITHMS:
        stage_metatrain(cfg, alg)
    m1, m2 = load_model(cfg, "alg1"), load_model(cfg, "alg2")
    predictors = {
        "baseline": baseline_predictor(m1),
        "+PR": refined_predictor(m1, cfg.refinement),
        "+fake-unlabeled": refined_predictor(m2, cfg.refinement),
        "+adaptation": adapted_predictor(m2, cfg.adaptation, cfg.refinement),
    }
    sampler = cfg.evaluation.sampler()
    per_method = {name: _score(cfg, bundle, p, sampler) for name, p in predictors.items()}
    write_results(path, per_method, lay.hash, sampler.stream_seed)
    header = ["method", "n_episodes"] + list(METRIC_NAMES) + [f"{k}_ci95" for k in METRIC_NAMES]
    _write_table(lay.table("ablation"), header, _summary_rows(per_method), lay.hash, sampler.stream_seed)
    return path


def stage_sweep(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Joint accuracy of plain PR (alg1) and the proposed model (alg2) per unlabeled ratio."""
    lay = _layout(cfg)
    path = lay.table("sweep")
    if path.exists() and not force:
        _read_table(lay, path)
        return path
    bundle = load_run_bundle(cfg)
    ev = cfg.evaluation
    models = {"alg1+pr": "alg1", "alg2+pr": "alg2"}
    ratios = list(dict.fromkeys([tuple(ev.sweep_reference)] + [tuple(r) for r in ev.sweep_ratios]))
    rows = []
    per_ratio: dict[tuple, dict] = {r: {} for r in ratios}
    for name, alg in models.items():
        stage_metatrain(cfg, alg)
        predict = refined_predictor(load_model(cfg, alg), cfg.refinement)
        reports = {}
        for r in ratios:
            metrics = _score(cfg, bundle, predict, ev.sampler(Mode.SEMI_SUPERVISED, r))
            per_ratio[r][name] = metrics
            reports[r] = aggregate(metrics)
        ref = reports[tuple(ev.sweep_reference)].mean["acc_all_all"]
        for r in ev.sweep_ratios:
            rep = reports[tuple(r)]
            rows.append([name, f"{r[0]}:{r[1]}", f"{rep.mean['acc_all_all']:.10f}",
                         f"{rep.ci95['acc_all_all']:.10f}", f"{rep.mean['acc_all_all'] - ref:.10f}"])
    for r, per_method in per_ratio.items():
        write_results(lay.results(f"sweep_{r[0]}-{r[1]}"), per_method, lay.hash, ev.stream_seed)
    _write_table(path, ["method", "ratio", "acc", "ci95", "delta"], rows, lay.hash, ev.stream_seed)
    return path


# --- report -------------------------------------------------------------------


def _read_loss_log(lay: RunLayout, path: Path) -> list[float]:
    lines = path.read_text().splitlines()
    lay.check(lines[0].partition("config_hash=")[2].split()[0], path)
    return [float(r["loss"]) for r in csv.DictReader(lines[1:])]


def _markdown_table(header, rows) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out)


def _paired(a, b) -> tuple[float, float]:
    """Mean and 95% CI half-width of per-episode joint-accuracy differences ``b - a``."""
    d = np.array([y.acc_all_all - x.acc_all_all for x, y in zip(a, b)])
    ci = 1.96 * d.std(ddof=1) / math.sqrt(len(d)) if len(d) > 1 else float("nan")
    return float(d.mean()), float(ci)


def _projection_plot(cfg: ExperimentConfig, lay: RunLayout, bundle: DatasetBundle) -> Path:
    model = load_model(cfg, "alg2")
    episode = sample_test_episode(bundle, cfg.evaluation.sampler(), cfg.evaluation.scatter_episode)
    with torch.no_grad():
        weights = imprint(model, episode)
        refined = refine_loop(model, weights, episode, cfg.refinement) if len(episode.unlabeled_X) else weights
        feats = model(episode.query_X).numpy()
    return _plot().plot_episode_projection(
        feats, episode.query_y, episode.n_base, weights.novel.numpy(), refined.novel.numpy(),
        lay.plot("episode_projection"), title=f"episode {episode.index} (config {lay.hash})")


def _plot():
    from . import plots  # matplotlib is only needed for the report stage
    return plots


def stage_report(cfg: ExperimentConfig) -> Path:
    """Collect existing artifacts into ``report.md``, ``report.json`` and plots.

    Only artifacts already present are reported; hashes are checked on each.
    """
    lay = _layout(cfg)
    bundle = load_run_bundle(cfg)
    sections = [f"# Run report\n\nconfig_hash: `{lay.hash}`  \nstream_seed: {cfg.evaluation.stream_seed}\n"]
    summary: dict = {"config_hash": lay.hash, "stream_seed": cfg.evaluation.stream_seed, "results": {}}
    header = ["method", "n"] + [k for k in METRIC_NAMES] + ["joint ci95"]
    for path in sorted((lay.root / "results").glob("*.csv")):
        _, per_method = _read_checked(lay, path)
        rows = []
        for method, metrics in per_method.items():
            rep: AggregateReport = aggregate(metrics)
            summary["results"].setdefault(path.stem, {})[method] = {"mean": rep.mean, "ci95": rep.ci95,
                                                                     "n_episodes": rep.n_episodes}
            rows.append([method, str(rep.n_episodes)] + [f"{100 * rep.mean[k]:.2f}" for k in METRIC_NAMES]
                        + [f"{100 * rep.ci95['acc_all_all']:.2f}"])
        sections.append(f"## {path.stem}\n\n" + _markdown_table(header, rows) + "\n")
        if path.stem == "ablation":
            diff, ci = _paired(per_method["+PR"], per_method["+fake-unlabeled"])
            summary["paired_fake_unlabeled_minus_pr"] = {"mean": diff, "ci95": ci}
            sections.append(f"Paired joint-accuracy difference (+fake-unlabeled minus +PR): "
                            f"{100 * diff:+.2f} ± {100 * ci:.2f}\n")

    curves = {}
    for name in ("pretrain", "metatrain_alg1", "metatrain_alg2"):
        if lay.loss_log(name).exists():
            curves[name] = _read_loss_log(lay, lay.loss_log(name))
    plots = []
    if curves:
        plots.append(_plot().plot_loss_curves(curves, lay.plot("loss_curves"), title=f"config {lay.hash}"))
    if lay.table("sweep").exists():
        table = _read_table(lay, lay.table("sweep"))
        rows = [{"method": r["method"], "ratio": tuple(int(v) for v in r["ratio"].split(":")),
                 "acc": float(r["acc"]), "ci95": float(r["ci95"]), "delta": float(r["delta"])} for r in table]
        summary["sweep"] = [dict(r, ratio=list(r["ratio"])) for r in rows]
        plots.append(_plot().plot_sweep(rows, lay.plot("ratio_sweep"), title=f"config {lay.hash}"))
        sections.append("## ratio sweep\n\n" + _markdown_table(
            ["method", "ratio", "joint acc", "ci95", "delta vs reference"],
            [[r["method"], "%d:%d" % r["ratio"], f"{100 * r['acc']:.2f}", f"{100 * r['ci95']:.2f}",
              f"{100 * r['delta']:+.2f}"] for r in rows]) + "\n")
    if lay.checkpoint("alg2").exists():
        plots.append(_projection_plot(cfg, lay, bundle))
    if plots:
        sections.append("## plots\n\n" + "\n".join(f"![{p.stem}](plots/{p.name})" for p in plots) + "\n")
    (lay.root / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    path = lay.root / "report.md"
    path.write_text("\n".join(sections))
    return path


def run_pipeline(cfg: ExperimentConfig, stages=None) -> Path:
    """Run ``stages`` (default: all) in order; returns the run directory.

    ``metatrain`` trains both algorithms and ``evaluate`` scores the configured
    methods on the alg2 checkpoint. Completed stages are skipped on rerun, so a
    failed run resumes where it stopped.
    """
    stages = tuple(stages or STAGES)
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValidationError(f"unknown stages {sorted(unknown)}")
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        if stage == "synth":
            stage_synth(cfg)
        elif stage == "pretrain":
            stage_pretrain(cfg)
        elif stage == "metatrain":
            for alg in ALGORITHMS:
                stage_metatrain(cfg, alg)
        elif stage == "evaluate":
            stage_evaluate(cfg, "alg2")
        elif stage == "ablate":
            stage_ablate(cfg)
        elif stage == "sweep":
            stage_sweep(cfg)
        elif stage == "report":
            stage_report(cfg)
    return Path(cfg.output_dir)
