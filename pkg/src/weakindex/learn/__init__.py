"""One-vs-rest training and prediction over a feature matrix."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import FeatureMatrix, FeatureSpace
from ..weaklabel import AlignmentError, LabelKind, LabelMatrix
from .linear import decision_function, fit_linear, loss_gradient
from .tree import Tree, build_forest, build_tree, forest_predict

__all__ = [
    "Classifier", "Penalty", "TrainConfig", "BinaryModel", "OvrModel", "TrainingError",
    "SpaceMismatchError", "train", "predict", "relabel_and_retrain", "RelabelResult",
    "loss_gradient", "label_seed",
]

logger = logging.getLogger(__name__)


class Classifier(str, enum.Enum):
    LOGREG = "logreg"
    LINEAR_SVM = "linear_svm"
    DECISION_TREE = "decision_tree"
    RANDOM_FOREST = "random_forest"


class Penalty(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"


class TrainingError(ValueError):
    def __init__(self, message: str, labels: Sequence[str] = ()):
        super().__init__(message)
        self.labels = list(labels)


class SpaceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    classifier: Classifier = Classifier.LOGREG
    penalty: Penalty = Penalty.L2
    C: float = 1.0
    max_depth: int | None = None
    min_leaf: int = 1
    n_trees: int = 100
    feature_subsample: float | None = None
    seed: int = 0
    max_iters: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "classifier", Classifier(self.classifier))
        object.__setattr__(self, "penalty", Penalty(self.penalty))
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")

    @property
    def linear(self) -> bool:
        return self.classifier in (Classifier.LOGREG, Classifier.LINEAR_SVM)

    @property
    def loss(self) -> str:
        return "hinge" if self.classifier is Classifier.LINEAR_SVM else "log"

    def to_json(self) -> dict:
        d = asdict(self)
        d["classifier"] = self.classifier.value
        d["penalty"] = self.penalty.value
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class BinaryModel:
    label_id: str
    weights: np.ndarray | None = None
    intercept: float = 0.0
    trees: list[Tree] | None = None
    n_iter: int = 0
    converged: bool = True

    def decide(self, X) -> np.ndarray:
        if self.trees is None:
            return (decision_function(X, self.weights, self.intercept) >= 0).astype(np.uint8)
        if len(self.trees) == 1:
            return self.trees[0].predict(X)
        return forest_predict(self.trees, X)

    def to_json(self) -> dict:
        if self.trees is not None:
            return {"label_id": self.label_id, "trees": [t.to_json() for t in self.trees]}
        w = self.weights
        nz = np.flatnonzero(w)
        if nz.size * 2 < w.size:
            weights = {"size": int(w.size), "indices": nz.tolist(),
                       "values": [float(x) for x in w[nz]]}
        else:
            weights = [float(x) for x in w]
        return {"label_id": self.label_id, "weights": weights, "intercept": float(self.intercept),
                "n_iter": self.n_iter, "converged": self.converged}

    @classmethod
    def from_json(cls, obj: dict) -> "BinaryModel":
        if "trees" in obj:
            return cls(obj["label_id"], trees=[Tree.from_json(t) for t in obj["trees"]])
        w = obj["weights"]
        if isinstance(w, dict):
            arr = np.zeros(w["size"])
            arr[w["indices"]] = w["values"]
        else:
            arr = np.array(w, dtype=float)
        return cls(obj["label_id"], arr, float(obj["intercept"]),
                   n_iter=obj.get("n_iter", 0), converged=obj.get("converged", True))


@dataclass
class OvrModel:
    label_ids: list[str]
    models: list[BinaryModel]
    space: FeatureSpace
    config: TrainConfig
    warnings: list[str] = field(default_factory=list)

    @property
    def space_digest(self) -> str:
        return self.space.digest()

    def model(self, label_id: str) -> BinaryModel:
        return self.models[self.label_ids.index(label_id)]

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "label_ids": self.label_ids,
            "space_digest": self.space_digest,
            "space": self.space.to_json(),
            "models": [m.to_json() for m in self.models],
            "warnings": self.warnings,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "OvrModel":
        space = FeatureSpace.from_json(obj["space"])
        if space.digest() != obj["space_digest"]:
            raise SpaceMismatchError("stored feature space does not match its digest")
        return cls(list(obj["label_ids"]), [BinaryModel.from_json(m) for m in obj["models"]],
                   space, TrainConfig.from_json(obj["config"]), list(obj.get("warnings", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "OvrModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def label_seed(seed: int, label_id: str) -> np.random.Generator:
    """Generator derived from ``(seed, label_id)``; independent of training order."""
    h = int.from_bytes(hashlib.sha256(label_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, h]))


def _fit_binary(X, y, label_id: str, cfg: TrainConfig) -> BinaryModel:
    if cfg.linear:
        fit = fit_linear(X, y, cfg.loss, cfg.penalty.value, cfg.C, cfg.max_iters, cfg.tol)
        return BinaryModel(label_id, fit.weights, fit.intercept, n_iter=fit.n_iter,
                           converged=fit.converged)
    rng = label_seed(cfg.seed, label_id)
    if cfg.classifier is Classifier.DECISION_TREE:
        trees = [build_tree(X, y, max_depth=cfg.max_depth, min_leaf=cfg.min_leaf)]
    else:
        trees = build_forest(X, y, n_trees=cfg.n_trees, max_depth=cfg.max_depth,
                             min_leaf=cfg.min_leaf, feature_subsample=cfg.feature_subsample,
                             rng=rng)
    return BinaryModel(label_id, trees=trees)


def _check_aligned(m: FeatureMatrix, labels: LabelMatrix):
    if list(m.pmids) != list(labels.pmids):
        raise AlignmentError("feature and label matrices are not row-aligned")


def train(m: FeatureMatrix, labels: LabelMatrix, targets: Sequence[str], cfg: TrainConfig,
          workers: int = 1) -> OvrModel:
    """Fit one binary model per target label.

    Raises:
        TrainingError: if any target label has only one class in ``labels``.
    """
    _check_aligned(m, labels)
    targets = list(targets)
    single = [t for t in targets if labels.column(t).min() == labels.column(t).max()]
    if single:
        raise TrainingError(f"labels with a single class cannot be trained: {single}", single)
    X = m.values

    def job(t):
        return _fit_binary(X, labels.column(t), t, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(job, targets))
    else:
        models = [job(t) for t in targets]
    warnings = [f"{bm.label_id}: optimizer stopped after {bm.n_iter} iterations without converging"
                for bm in models if not bm.converged]
    for w in warnings:
        logger.warning(w)
    return OvrModel(targets, models, m.space, cfg, warnings)


def predict(model: OvrModel, m: FeatureMatrix) -> LabelMatrix:
    if m.space.digest() != model.space_digest:
        raise SpaceMismatchError("feature matrix space differs from the model's space")
    cells = np.zeros((len(m.pmids), len(model.label_ids)), dtype=np.uint8)
    for j, bm in enumerate(model.models):
        cells[:, j] = bm.decide(m.values)
    return LabelMatrix(m.pmids, model.label_ids, cells, LabelKind.PREDICTED)


@dataclass
class RelabelResult:
    initial: OvrModel
    retrained: OvrModel
    original_labels: LabelMatrix
    relabeled: LabelMatrix
    skipped: list[str]


def relabel_and_retrain(model: OvrModel, train_m: FeatureMatrix, train_labels: LabelMatrix,
                        cfg: TrainConfig) -> RelabelResult:
    """Replace the training labels by the model's own predictions and retrain.

    Labels whose predicted column has a single class are skipped with a
    warning.
    """
    _check_aligned(train_m, train_labels)
    predicted = predict(model, train_m)
    cells = np.array(train_labels.cells)
    for j, t in enumerate(model.label_ids):
        cells[:, train_labels.label_ids.index(t)] = predicted.cells[:, j]
    relabeled = LabelMatrix(train_labels.pmids, train_labels.label_ids, cells, train_labels.kind)
    keep, skipped = [], []
    for t in model.label_ids:
        col = relabeled.column(t)
        (keep if col.min() != col.max() else skipped).append(t)
    for t in skipped:
        logger.warning("relabel: %s has a single class after relabeling; skipped", t)
    if not keep:
        raise TrainingError("no label left to retrain after relabeling", skipped)
    retrained = train(train_m, relabeled, keep, cfg)
    retrained.warnings.extend(f"{t}: skipped after relabeling (single class)" for t in skipped)
    return RelabelResult(model, retrained, train_labels, relabeled, skipped)
