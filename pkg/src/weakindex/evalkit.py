"""Per-label and macro-averaged metrics, Cohen's kappa and baseline annotators."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ingest import Corpus
from .recognizer import Dictionary, Granularity, recognize
from .thesaurus import Descriptor
from .weaklabel import AlignmentError, LabelKind, LabelMatrix


@dataclass(frozen=True)
class LabelMetrics:
    label_id: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class KappaResult:
    per_label: dict[str, float]
    macro_kappa: float
    degenerate: list[str] = field(default_factory=list)


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def label_metrics(label_id: str, pred: np.ndarray, gold: np.ndarray) -> LabelMetrics:
    pred = pred.astype(bool)
    gold = gold.astype(bool)
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return LabelMetrics(label_id, tp, fp, fn, p, r, _ratio(2 * p * r, p + r))


def _aligned(a: LabelMatrix, b: LabelMatrix, targets: Sequence[str]):
    if list(a.pmids) != list(b.pmids):
        raise AlignmentError("label matrices are not row-aligned")
    for t in targets:
        if t not in a.label_ids or t not in b.label_ids:
            raise AlignmentError(f"target label {t} missing from one of the matrices")


def evaluate(pred: LabelMatrix, golden: LabelMatrix, targets: Sequence[str]
             ) -> tuple[list[LabelMetrics], float]:
    """Binary P/R/F1 per target label and their unweighted mean F1.

    Undefined ratios (0/0) count as 0, including the F1 of a label with no
    golden positives and no predictions.
    """
    _aligned(pred, golden, targets)
    metrics = [label_metrics(t, pred.column(t), golden.column(t)) for t in targets]
    macro = float(np.mean([m.f1 for m in metrics])) if metrics else 0.0
    return metrics, macro


def cohen_kappa(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Kappa of two binary annotations; ``(0.0, True)`` when chance agreement is 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    n = a.size
    if n == 0:
        return 0.0, True
    po = np.mean(a == b)
    pa, pb = a.mean(), b.mean()
    pe = pa * pb + (1 - pa) * (1 - pb)
    if pe >= 1.0:
        return 0.0, True
    return float((po - pe) / (1 - pe)), False


def kappa(a: LabelMatrix, b: LabelMatrix, targets: Sequence[str]) -> KappaResult:
    _aligned(a, b, targets)
    per, degenerate = {}, []
    for t in targets:
        k, deg = cohen_kappa(a.column(t), b.column(t))
        per[t] = k
        if deg:
            degenerate.append(t)
    macro = float(np.mean(list(per.values()))) if per else 0.0
    return KappaResult(per, macro, degenerate)


# -- baselines --------------------------------------------------------------

class BaselineKind(str, enum.Enum):
    ALL_ALL = "AllAll"
    RANDOM = "Random"
    WS_LABELS = "WSLabels"
    WS_REST_ALL = "WSRestAll"
    ALL_M = "AllM"
    WS_REST_M = "WSRestM"
    D_TERMS = "DTerms"
    D_TOKENS = "DTokens"


class BaselineError(ValueError):
    pass


def baseline_predict(kind: BaselineKind | str, corpus: Corpus, weak: LabelMatrix | None,
                     targets: Sequence[str], descriptor: Descriptor | None = None,
                     dictionaries: Mapping[Granularity, Dictionary] | None = None,
                     seed: int = 0) -> LabelMatrix:
    """Predictions of a baseline annotator over the articles of ``corpus``.

    "Unlabeled" for the WSRest* baselines means no weak label among the
    targets and the top concept; without ``descriptor`` every column of
    ``weak`` counts.
    """
    kind = BaselineKind(kind)
    pmids = corpus.pmids
    targets = list(targets)
    n, k = len(pmids), len(targets)

    if kind in (BaselineKind.ALL_M, BaselineKind.WS_REST_M):
        if descriptor is None or descriptor.preferred_concept_id not in targets:
            raise BaselineError(f"{kind.value} needs the preferred concept among the targets")

    if kind is BaselineKind.ALL_ALL:
        cells = np.ones((n, k), dtype=np.uint8)
    elif kind is BaselineKind.RANDOM:
        cells = np.random.default_rng(seed).integers(0, 2, size=(n, k)).astype(np.uint8)
    elif kind is BaselineKind.ALL_M:
        cells = np.zeros((n, k), dtype=np.uint8)
        cells[:, targets.index(descriptor.preferred_concept_id)] = 1
    elif kind in (BaselineKind.D_TERMS, BaselineKind.D_TOKENS):
        gran = Granularity.TERM if kind is BaselineKind.D_TERMS else Granularity.TOKEN
        if not dictionaries or gran not in dictionaries:
            raise BaselineError(f"{kind.value} needs a {gran.value}-level dictionary")
        col = {t: j for j, t in enumerate(targets)}
        cells = np.zeros((n, k), dtype=np.uint8)
        for i, a in enumerate(corpus):
            for o in recognize(a, dictionaries[gran]):
                j = col.get(o.concept_id)
                if j is not None:
                    cells[i, j] = 1
    else:
        if weak is None:
            raise BaselineError(f"{kind.value} needs the weak label matrix")
        w = weak.rows(pmids)
        cells = np.array(w.columns(targets).cells)
        scope = list(w.label_ids)
        if descriptor is not None:
            scope = [c for c in dict.fromkeys([*targets, descriptor.top_concept_id]) if c in w.label_ids]
        unlabeled = ~w.columns(scope).cells.any(axis=1)
        if kind is BaselineKind.WS_REST_ALL:
            cells[unlabeled] = 1
        elif kind is BaselineKind.WS_REST_M:
            cells[unlabeled, targets.index(descriptor.preferred_concept_id)] = 1
    return LabelMatrix(pmids, targets, cells, LabelKind.PREDICTED)


# -- reports ----------------------------------------------------------------

def metrics_csv(metrics: Sequence[LabelMetrics], macro_f1: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "tp", "fp", "fn", "precision", "recall", "f1"])
    for m in metrics:
        w.writerow([m.label_id, m.tp, m.fp, m.fn, repr(m.precision), repr(m.recall), repr(m.f1)])
    w.writerow(["macro", "", "", "", "", "", repr(macro_f1)])
    return buf.getvalue()
