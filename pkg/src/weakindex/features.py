"""Lexical + semantic feature space, TF-IDF weighting and top-k selection."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Corpus
from .recognizer import ConceptOccurrence
from .thesaurus import Descriptor
from .weaklabel import AlignmentError, LabelMatrix

_TOKEN = re.compile(r"[^\W_]+")


class FeatureKind(str, enum.Enum):
    LEXICAL = "L"
    SEMANTIC = "S"


class Method(str, enum.Enum):
    CHI2 = "chi2"
    ANOVA_F = "anova_f"


class SelectionError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased maximal runs of Unicode letters/digits."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class FeatureDef:
    feature_id: int
    kind: FeatureKind
    key: str


class FeatureSpace:
    def __init__(self, features: Iterable[FeatureDef]):
        self.features = tuple(features)
        for i, f in enumerate(self.features):
            if f.feature_id != i:
                raise ValueError("feature ids must be dense 0..n-1 in order")
        self._index = {(f.kind, f.key): f.feature_id for f in self.features}
        if len(self._index) != len(self.features):
            raise ValueError("feature keys must be unique within a kind")

    @classmethod
    def from_keys(cls, lexical: Iterable[str], semantic: Iterable[str]) -> "FeatureSpace":
        defs = [(FeatureKind.LEXICAL, k) for k in lexical] + [(FeatureKind.SEMANTIC, k) for k in semantic]
        return cls(FeatureDef(i, kind, key) for i, (kind, key) in enumerate(defs))

    def __len__(self):
        return len(self.features)

    def __eq__(self, other):
        return isinstance(other, FeatureSpace) and self.features == other.features

    def index(self, kind: FeatureKind, key: str) -> int | None:
        return self._index.get((kind, key))

    def subset(self, feature_ids: Sequence[int]) -> "FeatureSpace":
        return FeatureSpace(FeatureDef(i, self.features[f].kind, self.features[f].key)
                            for i, f in enumerate(feature_ids))

    def to_json(self) -> list:
        return [[f.kind.value, f.key] for f in self.features]

    @classmethod
    def from_json(cls, obj: list) -> "FeatureSpace":
        return cls(FeatureDef(i, FeatureKind(k), key) for i, (k, key) in enumerate(obj))

    def digest(self) -> str:
        raw = json.dumps(self.to_json(), ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@dataclass
class FeatureMatrix:
    pmids: list[str]
    space: FeatureSpace
    values: sp.csr_matrix
    weighted: bool = False

    def __post_init__(self):
        self.values = sp.csr_matrix(self.values, dtype=np.float64)
        if self.values.shape != (len(self.pmids), len(self.space)):
            raise ValueError("values shape does not match pmids x features")
        if self.values.nnz and self.values.data.min() < 0:
            raise ValueError("feature values must be nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def rows(self, pmids: Sequence[str]) -> "FeatureMatrix":
        pos = {p: i for i, p in enumerate(self.pmids)}
        try:
            idx = [pos[p] for p in pmids]
        except KeyError as e:
            raise AlignmentError(f"pmid {e.args[0]} has no feature row") from None
        return FeatureMatrix(list(pmids), self.space, self.values[idx], self.weighted)

    def columns(self, feature_ids: Sequence[int]) -> "FeatureMatrix":
        """Raw sub-matrix over a subset of features (re-indexed space)."""
        if self.weighted:
            raise ValueError("take columns of the raw matrix and re-weight")
        return FeatureMatrix(self.pmids, self.space.subset(feature_ids),
                             self.values[:, list(feature_ids)], False)

    def save(self, path) -> None:
        v = self.values
        np.savez_compressed(path, data=v.data, indices=v.indices, indptr=v.indptr,
                            shape=np.array(v.shape), weighted=np.array(self.weighted),
                            pmids=np.array(self.pmids, dtype=str),
                            space=np.array(json.dumps(self.space.to_json())))

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        with np.load(path, allow_pickle=False) as z:
            shape = tuple(int(x) for x in z["shape"])
            values = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=shape)
            return cls([str(p) for p in z["pmids"]], FeatureSpace.from_json(json.loads(str(z["space"]))),
                       values, bool(z["weighted"]))


def build_features(corpus: Corpus, occurrences: Iterable[ConceptOccurrence],
                   min_token_df: int = 2, space: FeatureSpace | None = None
                   ) -> tuple[FeatureSpace, FeatureMatrix]:
    """Raw token counts plus binary concept-presence features.

    Without ``space`` a new space is built from ``corpus``: tokens occurring
    in fewer than ``min_token_df`` articles are dropped, every occurring
    concept is kept. With ``space`` the corpus is projected onto it and
    anything outside the space is ignored.
    """
    counts = [Counter(tokenize(a.text)) for a in corpus]
    concepts: dict[str, set[str]] = defaultdict(set)
    for o in occurrences:
        concepts[o.pmid].add(o.concept_id)

    if space is None:
        df = Counter()
        for c in counts:
            df.update(c.keys())
        lexical = sorted(t for t, n in df.items() if n >= min_token_df)
        semantic = sorted({c for s in concepts.values() for c in s})
        space = FeatureSpace.from_keys(lexical, semantic)

    rows, cols, vals = [], [], []
    for i, (a, c) in enumerate(zip(corpus, counts)):
        for tok, n in c.items():
            j = space.index(FeatureKind.LEXICAL, tok)
            if j is not None:
                rows.append(i); cols.append(j); vals.append(float(n))
        for cid in concepts.get(a.pmid, ()):
            j = space.index(FeatureKind.SEMANTIC, cid)
            if j is not None:
                rows.append(i); cols.append(j); vals.append(1.0)
    values = sp.csr_matrix((vals, (rows, cols)), shape=(len(corpus), len(space)))
    values.sort_indices()
    return space, FeatureMatrix(corpus.pmids, space, values, False)


def fit_idf(raw: FeatureMatrix) -> np.ndarray:
    """Smoothed inverse document frequency ``ln((1+N)/(1+df)) + 1``."""
    n = raw.values.shape[0]
    df = np.bincount(raw.values.indices, minlength=raw.values.shape[1])
    return np.log((1.0 + n) / (1.0 + df)) + 1.0


def apply_tfidf(raw: FeatureMatrix, idf: np.ndarray) -> FeatureMatrix:
    """Scale counts by ``idf`` and L2-normalize each nonzero row."""
    if raw.weighted:
        raise ValueError("matrix is already weighted")
    if len(idf) != raw.values.shape[1]:
        raise ValueError("idf length does not match the feature space")
    w = sp.csr_matrix(raw.values @ sp.diags(idf))
    norms = np.sqrt(np.asarray(w.multiply(w).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    w = sp.csr_matrix(sp.diags(scale) @ w)
    return FeatureMatrix(raw.pmids, raw.space, w, True)


def tfidf(raw: FeatureMatrix) -> FeatureMatrix:
    return apply_tfidf(raw, fit_idf(raw))


# -- scoring ----------------------------------------------------------------

@dataclass
class FeatureScores:
    """Per-feature, per-label scores (``values[f, j]`` for label ``targets[j]``)."""

    method: Method
    targets: list[str]
    values: np.ndarray
    degenerate_labels: list[str] = field(default_factory=list)


def _chi2(X: sp.csr_matrix, y: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    pos = y.astype(bool)
    total = np.asarray(X.sum(axis=0)).ravel()
    observed = np.vstack([
        np.asarray(X[~pos].sum(axis=0)).ravel(),
        np.asarray(X[pos].sum(axis=0)).ravel(),
    ])
    class_frac = np.array([(~pos).sum(), pos.sum()], dtype=float)[:, None] / n
    expected = class_frac * total[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    return terms.sum(axis=0)


def _anova_f(X: sp.csr_matrix, y: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    pos = y.astype(bool)
    sq = X.multiply(X)
    total_sum = np.asarray(X.sum(axis=0)).ravel()
    grand_mean = total_sum / n
    ssb = np.zeros(X.shape[1])
    ssw = np.zeros(X.shape[1])
    sum_sq = np.asarray(sq.sum(axis=0)).ravel()
    for mask in (pos, ~pos):
        ng = mask.sum()
        s = np.asarray(X[mask].sum(axis=0)).ravel()
        s2 = np.asarray(sq[mask].sum(axis=0)).ravel()
        mean = s / ng
        ssb += ng * (mean - grand_mean) ** 2
        ssw += s2 - ng * mean ** 2
    ssw = np.maximum(ssw, 0.0)
    ssw[ssw <= 1e-12 * np.maximum(sum_sq, 1e-300)] = 0.0
    msb = ssb / 1.0
    msw = ssw / (n - 2)
    out = np.zeros(X.shape[1])
    ok = msw > 0
    out[ok] = msb[ok] / msw[ok]
    out[~ok & (ssb > 0)] = np.inf
    return out


def score_features(m: FeatureMatrix, labels: LabelMatrix, targets: Sequence[str],
                   method: Method | str) -> FeatureScores:
    """Chi-squared or one-way ANOVA F of every feature against every target label.

    A label column with a single class cannot discriminate anything; all its
    scores are 0 and it is reported in ``degenerate_labels``.
    """
    method = Method(method)
    if list(labels.pmids) != list(m.pmids):
        raise AlignmentError("feature and label matrices are not row-aligned")
    X = m.values
    n = X.shape[0]
    out = np.zeros((X.shape[1], len(targets)))
    degenerate = []
    for j, t in enumerate(targets):
        y = labels.column(t)
        npos = int(y.sum())
        if npos == 0 or npos == n or (method is Method.ANOVA_F and n < 3):
            degenerate.append(t)
            continue
        out[:, j] = _chi2(X, y) if method is Method.CHI2 else _anova_f(X, y)
    return FeatureScores(method, list(targets), out, degenerate)


# -- selection --------------------------------------------------------------

@dataclass(frozen=True)
class SelectorConfig:
    """``scope`` is ``"shared"`` (rank by max score over labels) or
    ``"per_label"`` (interleave each label's own ranking)."""

    method: Method = Method.ANOVA_F
    k: int = 100
    exclude_ct_concepts: bool = False
    lexical_only: bool = False
    scope: str = "shared"

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.scope not in ("shared", "per_label"):
            raise ValueError(f"unknown selection scope {self.scope!r}")

    def to_json(self) -> dict:
        return {"method": self.method.value, "k": self.k,
                "exclude_ct_concepts": self.exclude_ct_concepts,
                "lexical_only": self.lexical_only, "scope": self.scope}


def eligible_features(space: FeatureSpace, cfg: SelectorConfig, d: Descriptor) -> np.ndarray:
    ct = set(d.concept_ids)
    keep = []
    for f in space.features:
        if f.kind is FeatureKind.SEMANTIC:
            if cfg.lexical_only or (cfg.exclude_ct_concepts and f.key in ct):
                continue
        keep.append(f.feature_id)
    return np.array(keep, dtype=int)


def _ranking(scores: np.ndarray, ids: np.ndarray) -> list[int]:
    # np.lexsort sorts by the last key first; -inf never occurs (scores >= 0)
    order = np.lexsort((ids, -scores[ids]))
    return [int(ids[i]) for i in order]


def select_top_k(scores: FeatureScores, cfg: SelectorConfig, space: FeatureSpace,
                 d: Descriptor) -> list[int]:
    """Highest-scoring ``cfg.k`` feature ids, ties broken by id."""
    ids = eligible_features(space, cfg, d)
    if cfg.k > len(ids):
        raise SelectionError(f"k={cfg.k} exceeds the {len(ids)} available features")
    if cfg.scope == "shared":
        agg = scores.values.max(axis=1) if scores.values.shape[1] else np.zeros(len(space))
        return _ranking(agg, ids)[: cfg.k]
    rankings = [_ranking(scores.values[:, j], ids) for j in range(scores.values.shape[1])]
    chosen, seen = [], set()
    for rank in range(len(ids)):
        for r in rankings:
            f = r[rank]
            if f not in seen:
                seen.add(f)
                chosen.append(f)
                if len(chosen) == cfg.k:
                    return chosen
    return chosen


def selection_report(scores: FeatureScores, selected: Sequence[int], space: FeatureSpace) -> str:
    """CSV: rank, kind (L/S), key, one score column per label, aggregate."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "kind", "key", *scores.targets, "aggregate"])
    for r, f in enumerate(selected, 1):
        row = scores.values[f]
        agg = row.max() if len(row) else 0.0
        w.writerow([r, space.features[f].kind.value, space.features[f].key,
                    *(_fmt(x) for x in row), _fmt(agg)])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "inf" if np.isinf(x) else repr(float(x))
