"""Label matrices and concept-occurrence weak labeling."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import Corpus
from .recognizer import ConceptOccurrence
from .thesaurus import Descriptor, fine_grained_labels


class LabelKind(str, enum.Enum):
    WEAK = "weak"
    GOLDEN = "golden"
    PREDICTED = "predicted"


class NoTrainableLabelsError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class LabelMatrix:
    """Binary article x label assignments.

    Cells are held densely (``uint8``); label sets are small, so sparse
    storage buys nothing at this scale.
    """

    def __init__(self, pmids: Sequence[str], label_ids: Sequence[str], cells, kind: LabelKind):
        self.pmids = list(pmids)
        self.label_ids = list(label_ids)
        self.kind = LabelKind(kind)
        cells = np.asarray(cells, dtype=np.uint8)
        if cells.size == 0:
            cells = cells.reshape(len(self.pmids), len(self.label_ids))
        if cells.shape != (len(self.pmids), len(self.label_ids)):
            raise ValueError(f"cells shape {cells.shape} does not match "
                             f"{len(self.pmids)} pmids x {len(self.label_ids)} labels")
        if cells.size and cells.max() > 1:
            raise ValueError("cells must be 0/1")
        if len(set(self.pmids)) != len(self.pmids):
            raise ValueError("pmids must be unique")
        if len(set(self.label_ids)) != len(self.label_ids):
            raise ValueError("label ids must be unique")
        cells.flags.writeable = False
        self.cells = cells
        self._row = {p: i for i, p in enumerate(self.pmids)}
        self._col = {l: j for j, l in enumerate(self.label_ids)}

    def __repr__(self):
        return f"LabelMatrix({self.kind.value}, {len(self.pmids)}x{len(self.label_ids)})"

    def __eq__(self, other):
        return (isinstance(other, LabelMatrix) and self.kind == other.kind
                and self.pmids == other.pmids and self.label_ids == other.label_ids
                and np.array_equal(self.cells, other.cells))

    @property
    def shape(self):
        return self.cells.shape

    def column(self, label_id: str) -> np.ndarray:
        return self.cells[:, self._col[label_id]]

    def row(self, pmid: str) -> np.ndarray:
        return self.cells[self._row[pmid]]

    def labels_of(self, pmid: str) -> set[str]:
        r = self.row(pmid)
        return {l for l, v in zip(self.label_ids, r) if v}

    def support(self) -> dict[str, int]:
        return dict(zip(self.label_ids, (int(x) for x in self.cells.sum(axis=0))))

    def rows(self, pmids: Iterable[str]) -> "LabelMatrix":
        pmids = list(pmids)
        idx = [self._row[p] for p in pmids]
        return LabelMatrix(pmids, self.label_ids, self.cells[idx], self.kind)

    def columns(self, label_ids: Sequence[str]) -> "LabelMatrix":
        idx = [self._col[l] for l in label_ids]
        return LabelMatrix(self.pmids, label_ids, self.cells[:, idx], self.kind)

    def with_kind(self, kind: LabelKind) -> "LabelMatrix":
        return LabelMatrix(self.pmids, self.label_ids, self.cells, kind)

    def align(self, pmids: Sequence[str], label_ids: Sequence[str]) -> "LabelMatrix":
        missing = [p for p in pmids if p not in self._row]
        if missing:
            raise AlignmentError(f"{len(missing)} pmids have no row, e.g. {missing[0]}")
        absent = [l for l in label_ids if l not in self._col]
        if absent:
            raise AlignmentError(f"labels {absent} are not columns")
        return self.rows(pmids).columns(label_ids)

    # -- serialization --------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pmid", *self.label_ids])
        for p, r in zip(self.pmids, self.cells):
            w.writerow([p, *(int(x) for x in r)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind: LabelKind) -> "LabelMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            return cls([], [], np.zeros((0, 0)), kind)
        header = rows[0]
        if not header or header[0] != "pmid":
            raise ValueError("label CSV must start with a 'pmid' column")
        body = [r for r in rows[1:] if r]
        cells = np.array([[int(x) for x in r[1:]] for r in body], dtype=np.uint8)
        return cls([r[0] for r in body], header[1:],
                   cells.reshape(len(body), len(header) - 1), kind)

    def to_sparse_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "pmids": self.pmids,
            "label_ids": self.label_ids,
            "positives": {p: [l for l, v in zip(self.label_ids, r) if v]
                          for p, r in zip(self.pmids, self.cells) if r.any()},
        }

    @classmethod
    def from_sparse_json(cls, obj: dict) -> "LabelMatrix":
        pmids, label_ids = obj["pmids"], obj["label_ids"]
        col = {l: j for j, l in enumerate(label_ids)}
        row = {p: i for i, p in enumerate(pmids)}
        cells = np.zeros((len(pmids), len(label_ids)), dtype=np.uint8)
        for p, labels in obj["positives"].items():
            for l in labels:
                cells[row[p], col[l]] = 1
        return cls(pmids, label_ids, cells, LabelKind(obj["kind"]))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_sparse_json(), indent=1) + "\n", encoding="utf-8")
        else:
            path.write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, kind: LabelKind = LabelKind.GOLDEN) -> "LabelMatrix":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            return cls.from_sparse_json(json.loads(text))
        return cls.from_csv(text, kind)


def assign_weak_labels(corpus: Corpus, occurrences: Iterable[ConceptOccurrence],
                       d: Descriptor) -> LabelMatrix:
    """One column per concept of the descriptor, top concept included.

    Occurrences of concepts outside the descriptor are ignored here; they
    still serve as semantic features.
    """
    label_ids = d.concept_ids
    col = {c: j for j, c in enumerate(label_ids)}
    row = {p: i for i, p in enumerate(corpus.pmids)}
    cells = np.zeros((len(row), len(col)), dtype=np.uint8)
    for o in occurrences:
        j = col.get(o.concept_id)
        if j is None:
            continue
        i = row.get(o.pmid)
        if i is None:
            raise AlignmentError(f"occurrence for pmid {o.pmid} not in corpus")
        cells[i, j] = 1
    return LabelMatrix(corpus.pmids, label_ids, cells, LabelKind.WEAK)


def target_labels(m: LabelMatrix, d: Descriptor, min_support: int = 1) -> list[str]:
    """Fine-grained labels with at least ``min_support`` weakly labeled articles."""
    if m.kind is not LabelKind.WEAK:
        raise ValueError("target labels are derived from a weak label matrix")
    if min_support < 0:
        raise ValueError("min_support must be nonnegative")
    support = m.support()
    out = [l for l in fine_grained_labels(d) if support.get(l, 0) >= min_support]
    if not out:
        raise NoTrainableLabelsError(
            f"no fine-grained label reaches min_support={min_support} (supports: {support})")
    return out
