"""Value types shared across the package: dataset splits, episodes, weights.

Class ids are dense positive integers. Base classes occupy ``1..N_b``; inside
an episode the selected novel classes are relabeled ``N_b+1..N_b+N``. Column
``c`` of a joint weight matrix therefore scores label ``c + 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

__all__ = [
    "ValidationError",
    "LabelAccessError",
    "Mode",
    "LabeledExample",
    "Split",
    "DatasetBundle",
    "EpisodeSpec",
    "Episode",
    "ClassifierWeights",
    "relabel_novel",
    "validate_bundle",
    "check_probabilities",
    "save_bundle",
    "load_bundle",
    "read_bundle_header",
]

SPLIT_NAMES = ("base_train", "base_val", "base_test", "novel_train", "novel_val", "novel_test")
DATASET_FORMAT_VERSION = 1


class ValidationError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    """Raised when learning code touches the hidden labels of an unlabeled set."""


class Mode(str, enum.Enum):
    INDUCTIVE = "inductive"
    TRANSDUCTIVE = "transductive"
    SEMI_SUPERVISED = "semi_supervised"


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Split:
    """One dataset split held as a feature matrix plus integer labels."""

    X: np.ndarray
    y: np.ndarray
    classes: frozenset = None
    _by_class: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if len(X) != len(y):
            raise ValidationError(f"split has {len(X)} rows but {len(y)} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.classes is None:
            object.__setattr__(self, "classes", frozenset(int(c) for c in np.unique(y)))
        else:
            object.__setattr__(self, "classes", frozenset(int(c) for c in self.classes))
        by_class = {c: np.flatnonzero(y == c) for c in sorted(self.classes)}
        object.__setattr__(self, "_by_class", by_class)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.X[i], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledExample]:
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def indices_of(self, label: int) -> np.ndarray:
        return self._by_class.get(int(label), np.empty(0, dtype=np.int64))

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], dim: int, classes=None) -> "Split":
        if len(examples) == 0:
            return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), classes=classes or ())
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
        return cls(X, y, classes=classes)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    base_train: Split
    base_val: Split
    base_test: Split
    novel_train: Split
    novel_val: Split
    novel_test: Split

    @property
    def base_classes(self) -> frozenset:
        return self.base_train.classes | self.base_val.classes | self.base_test.classes

    @property
    def novel_classes(self) -> frozenset:
        return self.novel_train.classes | self.novel_val.classes | self.novel_test.classes

    @property
    def n_base(self) -> int:
        return len(self.base_classes)

    @property
    def dim(self) -> int:
        return self.base_train.dim

    def splits(self) -> dict[str, Split]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def pools(self, stage: str) -> tuple[Split, Split]:
        """Return the (novel, base) source splits for ``train``, ``val`` or ``test``."""
        if stage not in ("train", "val", "test"):
            raise ValueError(f"unknown stage {stage!r}")
        return getattr(self, f"novel_{stage}"), getattr(self, f"base_{stage}")


def validate_bundle(bundle: DatasetBundle) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    overlap = bundle.base_classes & bundle.novel_classes
    for c in sorted(overlap):
        problems.append(f"class {c} appears in both base and novel class sets")
    novel = ("novel_train", "novel_val", "novel_test")
    for i, a in enumerate(novel):
        for b in novel[i + 1:]:
            shared = getattr(bundle, a).classes & getattr(bundle, b).classes
            for c in sorted(shared):
                problems.append(f"class {c} shared by {a} and {b}")
    base_classes = bundle.base_classes
    dim = bundle.dim
    for name, split in bundle.splits().items():
        if len(split) and split.dim != dim:
            problems.append(f"{name}: input dimension {split.dim} != {dim}")
        allowed = base_classes if name.startswith("base") else split.classes
        bad = np.flatnonzero(~np.isin(split.y, sorted(allowed)))
        for i in bad:
            problems.append(f"{name}[{i}]: label {int(split.y[i])} outside the split's class set")
    if base_classes and sorted(base_classes) != list(range(1, len(base_classes) + 1)):
        problems.append("base class ids are not the dense range 1..N_b")
    return problems


class EpisodeSpec:
    """Counts and mode describing one family of episodes."""

    __slots__ = ("n_way", "k_shot", "n_query_novel", "n_query_base",
                 "n_unlabeled_novel", "n_unlabeled_base", "mode", "seed")

    def __init__(self, n_way=5, k_shot=1, n_query_novel=75, n_query_base=75,
                 n_unlabeled_novel=0, n_unlabeled_base=0, mode=Mode.INDUCTIVE, seed=0):
        counts = dict(n_query_novel=n_query_novel, n_query_base=n_query_base,
                      n_unlabeled_novel=n_unlabeled_novel, n_unlabeled_base=n_unlabeled_base)
        if n_way < 1 or k_shot < 1:
            raise ValidationError("n_way and k_shot must be >= 1")
        for k, v in counts.items():
            if v < 0:
                raise ValidationError(f"{k} must be >= 0, got {v}")
        object.__setattr__(self, "n_way", int(n_way))
        object.__setattr__(self, "k_shot", int(k_shot))
        for k, v in counts.items():
            object.__setattr__(self, k, int(v))
        object.__setattr__(self, "mode", Mode(mode))
        object.__setattr__(self, "seed", int(seed))

    def __setattr__(self, key, value):
        raise AttributeError("EpisodeSpec is immutable")

    def replace(self, **changes) -> "EpisodeSpec":
        kw = self.to_dict()
        kw.update(changes)
        return EpisodeSpec(**kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__slots__}
        d["mode"] = self.mode.value
        return d

    def __eq__(self, other):
        return isinstance(other, EpisodeSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(self.to_dict().items()))

    def __repr__(self):
        inner = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items())
        return f"EpisodeSpec({inner})"


def relabel_novel(original_ids: Sequence[int], n_base: int) -> tuple[np.ndarray, dict[int, int]]:
    """Map original novel class ids onto ``n_base+1..n_base+N`` in sorted order.

    Returns the relabeled array (same order as ``original_ids``) and the mapping.
    """
    original_ids = np.asarray(original_ids, dtype=np.int64).reshape(-1)
    label_map = {int(c): n_base + 1 + j for j, c in enumerate(np.unique(original_ids))}
    if len(set(label_map.values())) != len(label_map):
        raise ValidationError("label map is not a bijection")
    relabeled = np.array([label_map[int(c)] for c in original_ids], dtype=np.int64)
    return relabeled, label_map


class _LabelGuard:
    """Counts reads of hidden labels; reads outside the oracle view raise."""

    def __init__(self):
        self.access_count = 0
        self.oracle = False


@dataclass(frozen=True, eq=False)
class Episode:
    """Support, query and unlabeled sets for one incremental few-shot task.

    Index arrays point into the source splits named by ``stage`` so that an
    episode can be serialized without copying features. ``unlabeled_X`` is
    visible to learning code; its labels are only reachable through
    :meth:`oracle_view`.
    """

    spec: EpisodeSpec
    n_base: int
    label_map: Mapping[int, int]
    support_X: np.ndarray
    support_y: np.ndarray
    query_X: np.ndarray
    query_y: np.ndarray
    unlabeled_X: np.ndarray
    _unlabeled_y: np.ndarray = field(repr=False)
    index: int = 0
    stage: str = "test"
    sources: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    _guard: _LabelGuard = field(default_factory=_LabelGuard, repr=False)

    @classmethod
    def from_arrays(cls, n_base: int, support_X, support_y, query_X, query_y, unlabeled_X=None,
                    unlabeled_y=None, mode: Mode | str = Mode.SEMI_SUPERVISED, index: int = 0) -> "Episode":
        """Episode from in-memory arrays whose labels already follow the episode convention."""
        support_y = np.asarray(support_y, dtype=np.int64)
        query_y = np.asarray(query_y, dtype=np.int64)
        support_X = np.asarray(support_X, dtype=np.float64).reshape(len(support_y), -1)
        d = support_X.shape[1]
        query_X = np.asarray(query_X, dtype=np.float64).reshape(len(query_y), d)
        if unlabeled_X is None:
            unlabeled_X = np.zeros((0, d))
        unlabeled_X = np.asarray(unlabeled_X, dtype=np.float64).reshape(-1, d)
        unlabeled_y = (np.zeros(len(unlabeled_X), dtype=np.int64) if unlabeled_y is None
                       else np.asarray(unlabeled_y, dtype=np.int64))
        novel = np.unique(support_y)
        n_way = len(novel)
        if not np.array_equal(novel, np.arange(n_base + 1, n_base + n_way + 1)):
            raise ValidationError(f"support labels must be exactly {n_base + 1}..{n_base + n_way}")
        counts = np.bincount(support_y - n_base - 1)
        is_novel_q = query_y > n_base
        is_novel_u = unlabeled_y > n_base
        spec = EpisodeSpec(n_way=n_way, k_shot=int(counts.min()), n_query_novel=int(is_novel_q.sum()),
                           n_query_base=int((~is_novel_q).sum()), n_unlabeled_novel=int(is_novel_u.sum()),
                           n_unlabeled_base=int((~is_novel_u).sum()), mode=mode)
        return cls(spec, int(n_base), {int(c): int(c) for c in novel}, support_X, support_y, query_X, query_y,
                   unlabeled_X, unlabeled_y, index=index, stage="custom")

    @property
    def n_way(self) -> int:
        return self.spec.n_way

    @property
    def unlabeled_is_query(self) -> bool:
        return self.spec.mode is Mode.TRANSDUCTIVE

    @property
    def label_access_count(self) -> int:
        return self._guard.access_count

    @property
    def unlabeled_y(self) -> np.ndarray:
        if not self._guard.oracle:
            raise LabelAccessError("unlabeled labels are hidden outside oracle_view()")
        self._guard.access_count += 1
        return self._unlabeled_y

    def oracle_view(self):
        episode = self

        class _Ctx:
            def __enter__(self_inner):
                episode._guard.oracle = True
                return episode

            def __exit__(self_inner, *exc):
                episode._guard.oracle = False
                return False

        return _Ctx()

    @property
    def novel_query_mask(self) -> np.ndarray:
        return self.query_y > self.n_base

    def to_record(self) -> dict:
        """Self-describing record: spec, source indices, label map."""
        return {
            "format": "s2ifsl-episode",
            "version": 1,
            "index": int(self.index),
            "stage": self.stage,
            "n_base": int(self.n_base),
            "spec": self.spec.to_dict(),
            "label_map": {str(k): int(v) for k, v in sorted(self.label_map.items())},
            "sources": {k: [int(i) for i in v] for k, v in self.sources.items()},
        }


@dataclass(frozen=True, eq=False)
class ClassifierWeights:
    """Column-per-class weights ``W = [W_b, W_n]`` of shape ``(d, N_b + N)``."""

    base: torch.Tensor
    novel: torch.Tensor

    def __post_init__(self):
        base, novel = self.base, self.novel
        if novel is None or novel.numel() == 0:
            novel = base.new_zeros((base.shape[0], 0))
            object.__setattr__(self, "novel", novel)
        if base.shape[0] != novel.shape[0]:
            raise ValidationError(
                f"feature dimension mismatch: base has d={base.shape[0]}, novel has d={novel.shape[0]}")
        if not (torch.isfinite(base).all() and torch.isfinite(novel).all()):
            raise ValidationError("classifier weights must be finite")

    @property
    def d(self) -> int:
        return self.base.shape[0]

    @property
    def n_base(self) -> int:
        return self.base.shape[1]

    @property
    def n_novel(self) -> int:
        return self.novel.shape[1]

    @property
    def joint(self) -> torch.Tensor:
        return torch.cat([self.base, self.novel], dim=1)


def check_probabilities(probs, atol: float = 1e-6) -> None:
    """Raise if any row of ``probs`` is not a probability distribution."""
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    if p.ndim != 2:
        raise ValidationError("prediction matrix must be 2-D")
    if p.size and (p.min() < 0 or p.max() > 1 + atol):
        raise ValidationError("probabilities outside [0, 1]")
    if len(p) and p.shape[1] and np.abs(p.sum(axis=1) - 1).max() > atol:
        raise ValidationError("prediction rows do not sum to 1")


# Dataset text container:
#   line 1: "#S2IFSL-DATASET version=<v> d=<d> count=<n>"
#   line 2: "split,label,x0,...,x{d-1}"
#   then one comma-separated row per example; split is one of SPLIT_NAMES.
def save_bundle(bundle: DatasetBundle, path, meta: dict | None = None) -> None:
    """Write ``bundle`` as CSV; ``meta`` adds ``key=value`` tokens to the header line."""
    path = Path(path)
    d = bundle.dim
    rows = []
    for name, split in bundle.splits().items():
        for x, y in zip(split.X, split.y):
            rows.append(",".join([name, str(int(y))] + [repr(float(v)) for v in x]))
    header = [
        " ".join([f"#S2IFSL-DATASET version={DATASET_FORMAT_VERSION} d={d} count={len(rows)}"]
                 + [f"{k}={v}" for k, v in (meta or {}).items()]),
        ",".join(["split", "label"] + [f"x{i}" for i in range(d)]),
    ]
    path.write_text("\n".join(header + rows) + "\n")


def read_bundle_header(path) -> dict[str, str]:
    with Path(path).open() as fh:
        first = fh.readline()
    if not first.startswith("#S2IFSL-DATASET"):
        raise ValidationError(f"{path}: missing dataset header")
    return dict(tok.split("=", 1) for tok in first.split()[1:])


def load_bundle(path) -> DatasetBundle:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#S2IFSL-DATASET"):
        raise ValidationError(f"{path}: missing dataset header")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    if int(meta["version"]) != DATASET_FORMAT_VERSION:
        raise ValidationError(f"unsupported dataset version {meta['version']}")
    d, count = int(meta["d"]), int(meta["count"])
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != count:
        raise ValidationError(f"header declares {count} examples, found {len(body)}")
    X = {n: [] for n in SPLIT_NAMES}
    y = {n: [] for n in SPLIT_NAMES}
    for lineno, ln in enumerate(body, start=3):
        parts = ln.split(",")
        if len(parts) != d + 2 or parts[0] not in X:
            raise ValidationError(f"{path}:{lineno}: malformed record")
        X[parts[0]].append([float(v) for v in parts[2:]])
        y[parts[0]].append(int(parts[1]))
    splits = {n: Split(np.array(X[n], dtype=np.float64).reshape(-1, d), np.array(y[n], dtype=np.int64))
              for n in SPLIT_NAMES}
    return DatasetBundle(**splits)
