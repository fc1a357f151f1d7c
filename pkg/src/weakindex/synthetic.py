"""Synthetic corpora with known golden labels and controlled weak-label noise.

Each article is built from background words plus, for every golden label,
a few label-specific cue words. A golden-positive article mentions one of
the label's thesaurus terms with probability ``1 - miss_rate``; any article
mentions a term of a label it does not have with probability
``spurious_rate``. Term words never occur anywhere else, so the dictionary
matcher's weak labels differ from the golden ones only through those two
noise processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import Article, Corpus
from .thesaurus import Concept, Descriptor, Relation, Term
from .weaklabel import LabelKind, LabelMatrix

DESCRIPTOR_ID = "SYN"
TOP_ID = "TOP"

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticSpec:
    n_articles: int = 200
    labels: list[str] = field(default_factory=lambda: ["L1", "L2", "L3", "L4"])
    synonym_map: dict[str, list[str]] | None = None
    miss_rate: float = 0.3
    spurious_rate: float = 0.05
    seed: int = 0
    prevalence: float = 0.15
    top_mention_rate: float = 0.7
    cues_per_label: int = 12
    cue_rate: float = 3.0
    cue_leak_rate: float = 0.1
    background_vocab: int = 1500
    length: tuple[int, int] = (40, 90)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["length"] = list(self.length)
        return d


def _words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _sentences(words: list[str]) -> str:
    out = []
    for i in range(0, len(words), 12):
        chunk = words[i:i + 12]
        if chunk:
            out.append(" ".join(chunk).capitalize() + ".")
    return " ".join(out)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Corpus, LabelMatrix, Descriptor]:
    if not spec.labels:
        raise ValueError("a synthetic corpus needs at least one label")
    for name in ("miss_rate", "spurious_rate"):
        v = getattr(spec, name)
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{name} must be in [0, 1), got {v}")
    if spec.n_articles < 0:
        raise ValueError("n_articles must be nonnegative")

    rng = np.random.default_rng(spec.seed)
    taken: set[str] = set()
    top_word, = _words(rng, 1, taken)
    synonyms = {}
    for lab in spec.labels:
        if spec.synonym_map and lab in spec.synonym_map:
            terms = list(spec.synonym_map[lab])
            for t in terms:
                taken.update(t.lower().split())
        else:
            a, b = _words(rng, 2, taken)
            terms = [f"{a} {top_word}", f"{b} {a}"]
        synonyms[lab] = terms
    cues = {lab: _words(rng, spec.cues_per_label, taken) for lab in spec.labels}
    background = _words(rng, spec.background_vocab, taken)
    # Zipf-like background frequencies
    bg_p = 1.0 / np.arange(1, len(background) + 1)
    bg_p /= bg_p.sum()

    descriptor = Descriptor(
        descriptor_id=DESCRIPTOR_ID,
        name=f"{top_word.capitalize()} disorder",
        concepts=(
            Concept(TOP_ID, top_word, (Term(top_word, True), Term(f"{top_word} disorder")),
                    Relation.PREFERRED),
            *(Concept(lab, synonyms[lab][0],
                      tuple(Term(t, i == 0) for i, t in enumerate(synonyms[lab])),
                      Relation.NARROWER)
              for lab in spec.labels),
        ),
        preferred_concept_id=TOP_ID,
        top_concept_id=TOP_ID,
    )

    n_labels = len(spec.labels)
    golden = (rng.random((spec.n_articles, n_labels)) < spec.prevalence).astype(np.uint8)
    articles = []
    width = len(str(max(spec.n_articles, 1)))
    for i in range(spec.n_articles):
        length = int(rng.integers(spec.length[0], spec.length[1] + 1))
        words = list(rng.choice(background, size=length, p=bg_p))
        inserts: list[str] = []
        if rng.random() < spec.top_mention_rate:
            inserts.append(top_word)
        for j, lab in enumerate(spec.labels):
            if not golden[i, j]:
                continue
            n_cues = 1 + int(rng.poisson(spec.cue_rate))
            inserts.extend(rng.choice(cues[lab], size=n_cues))
            if rng.random() >= spec.miss_rate:
                terms = synonyms[lab]
                inserts.append(terms[int(rng.integers(len(terms)))])
        off = [lab for j, lab in enumerate(spec.labels) if not golden[i, j]]
        if off and rng.random() < spec.spurious_rate:
            lab = off[int(rng.integers(len(off)))]
            terms = synonyms[lab]
            inserts.append(terms[int(rng.integers(len(terms)))])
        if rng.random() < spec.cue_leak_rate:
            lab = spec.labels[int(rng.integers(n_labels))]
            inserts.append(str(rng.choice(cues[lab])))
        for item in inserts:
            words.insert(int(rng.integers(len(words) + 1)), str(item))
        cut = min(len(words), int(rng.integers(6, 12)))
        title = " ".join(words[:cut]).capitalize()
        abstract = _sentences(words[cut:])
        articles.append(Article(f"S{i:0{width}d}", title, abstract, (DESCRIPTOR_ID,)))

    corpus = Corpus(articles, DESCRIPTOR_ID)
    labels = LabelMatrix(corpus.pmids, list(spec.labels), golden, LabelKind.GOLDEN)
    return corpus, labels, descriptor
