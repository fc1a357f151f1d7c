"""Test/training split construction: random and label-combination balanced
test sets, the weakly supervised training set, majority under-sampling and
cross-validation folds.

Every function that draws randomly takes an explicit integer seed and uses
its own ``numpy.random.Generator``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .thesaurus import Descriptor
from .weaklabel import LabelMatrix


class SplitError(ValueError):
    pass


@dataclass
class SplitBundle:
    ma1: list[str]
    ma2: list[str]
    ws: list[str]
    seed: int

    def __post_init__(self):
        a, b, c = set(self.ma1), set(self.ma2), set(self.ws)
        if a & b or a & c or b & c:
            raise SplitError("ma1, ma2 and ws must be pairwise disjoint")

    def to_json(self) -> dict:
        return {"seed": self.seed, "ma1": self.ma1, "ma2": self.ma2, "ws": self.ws}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitBundle":
        return cls(list(obj["ma1"]), list(obj["ma2"]), list(obj["ws"]), int(obj["seed"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitBundle":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold(self, i: int) -> list[str]:
        return [p for p, f in self.assignments.items() if f == i]

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        train = [p for p, f in self.assignments.items() if f != i]
        return train, self.fold(i)


def save_pmid_list(pmids: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in pmids), encoding="utf-8")


def load_pmid_list(path: str | Path) -> list[str]:
    return [l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def split_ma1(pmids: Sequence[str], n: int, seed: int) -> list[str]:
    """Uniform sample of ``n`` pmids without replacement."""
    if n < 0 or n > len(pmids):
        raise SplitError(f"cannot draw {n} articles from {len(pmids)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pmids), size=n, replace=False)
    return [pmids[i] for i in idx]


def _combination(m: LabelMatrix, pmid: str) -> tuple[str, ...]:
    r = m.row(pmid)
    return tuple(l for l, v in zip(m.label_ids, r) if v)


def split_ma2(pmids: Sequence[str], weak: LabelMatrix, d: Descriptor, n: int,
              seed: int) -> list[str]:
    """Label-combination balanced sample.

    Articles are grouped by their exact weak-label set (over every concept of
    the descriptor); the group whose only label is the preferred concept is
    left out, the empty set takes part. Groups are visited round-robin, rarest
    first (ties by label tuple), taking one random article per visit, until
    ``n`` are chosen. A group stops contributing once ``max(1, size // 2)`` of
    its articles have been taken.
    """
    if n < 0:
        raise SplitError("n must be nonnegative")
    groups: dict[tuple[str, ...], list[str]] = defaultdict(list)
    majority = (d.preferred_concept_id,)
    for p in pmids:
        combo = _combination(weak, p)
        if combo != majority:
            groups[combo].append(p)
    order = sorted(groups, key=lambda c: (len(groups[c]), c))
    caps = {c: max(1, len(groups[c]) // 2) for c in order}
    feasible = sum(caps.values())
    if n > feasible:
        raise SplitError(f"only {feasible} articles can be drawn under the per-combination caps, "
                         f"{n} requested")

    rng = np.random.default_rng(seed)
    remaining = {c: list(groups[c]) for c in order}
    taken = {c: 0 for c in order}
    selected: list[str] = []
    while len(selected) < n:
        for c in order:
            if len(selected) == n:
                break
            if taken[c] >= caps[c]:
                continue
            pool = remaining[c]
            selected.append(pool.pop(int(rng.integers(len(pool)))))
            taken[c] += 1
    return selected


def build_ws(pmids: Sequence[str], ma1: Sequence[str], ma2: Sequence[str],
             weak: LabelMatrix) -> list[str]:
    """Everything outside the test sets that carries at least one weak label."""
    held_out = set(ma1) | set(ma2)
    return [p for p in pmids if p not in held_out and weak.row(p).any()]


def undersample_majority(ws_pmids: Sequence[str], weak: LabelMatrix, d: Descriptor,
                         target: int, seed: int) -> list[str]:
    """Shrink the preferred-concept class to roughly ``target`` articles.

    ``target`` is the desired size of the whole preferred-concept column.
    Articles with any weak label besides the preferred concept are always
    kept; the articles labeled with the preferred concept alone are randomly
    reduced so the column totals ``target`` (or as close as the kept articles
    allow). Input order is preserved.
    """
    if target < 0:
        raise SplitError("target must be nonnegative")
    pref = d.preferred_concept_id
    pref_col = weak.label_ids.index(pref)
    only_pref, keep_with_pref = [], 0
    for i, p in enumerate(ws_pmids):
        r = weak.row(p)
        if r[pref_col]:
            if r.sum() == 1:
                only_pref.append(i)
            else:
                keep_with_pref += 1
    quota = max(0, target - keep_with_pref)
    if quota >= len(only_pref):
        return list(ws_pmids)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(only_pref, size=quota, replace=False).tolist())
    dropped = set(only_pref) - chosen
    return [p for i, p in enumerate(ws_pmids) if i not in dropped]


def make_folds(pmids: Sequence[str], k: int, seed: int) -> FoldPlan:
    """Shuffle, then cut into ``k`` contiguous folds differing in size by at most one."""
    if k < 2 or k > len(pmids):
        raise SplitError(f"k must be in [2, {len(pmids)}], got {k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pmids))
    assignments = {}
    for f, chunk in enumerate(np.array_split(perm, k)):
        for i in chunk:
            assignments[pmids[i]] = f
    return FoldPlan(k, assignments)
