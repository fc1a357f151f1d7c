"""Literal dictionary matching of concept terms, plus import of concept
occurrences produced by an external tagger."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .ingest import Article, Corpus
from .thesaurus import Descriptor

_NON_ALNUM = re.compile(r"[\W_]+")


class Granularity(str, enum.Enum):
    TERM = "term"
    TOKEN = "token"


class Source(str, enum.Enum):
    DICTIONARY = "dictionary"
    IMPORTED = "imported"


class OccurrenceImportError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase; any run of non-alphanumerics becomes one space; trimmed."""
    return _NON_ALNUM.sub(" ", text.lower()).strip()


@dataclass(frozen=True)
class ConceptOccurrence:
    pmid: str
    concept_id: str
    matched_text: str = ""
    span: tuple[int, int] | None = None
    source: Source = Source.DICTIONARY


@dataclass(frozen=True)
class Dictionary:
    entries: Mapping[str, tuple[str, ...]]
    granularity: Granularity

    @property
    def max_len(self) -> int:
        return max((k.count(" ") + 1 for k in self.entries), default=0)

    def concepts(self) -> set[str]:
        return {c for ids in self.entries.values() for c in ids}

    def dump(self) -> str:
        return json.dumps({k: list(v) for k, v in sorted(self.entries.items())},
                          indent=2, ensure_ascii=False)


def _add(entries: dict[str, list[str]], key: str, concept_id: str) -> None:
    if not key:
        return
    ids = entries.setdefault(key, [])
    if concept_id not in ids:
        ids.append(concept_id)


def build_dictionary(d: Descriptor, granularity: Granularity | str = Granularity.TERM,
                     auxiliary: Mapping[str, Iterable[str]] | None = None) -> Dictionary:
    """Map normalized terms (and, at token level, their tokens) to concepts.

    ``auxiliary`` maps extra concept ids (outside the descriptor) to their
    terms; those are always matched as whole terms.
    """
    granularity = Granularity(granularity)
    entries: dict[str, list[str]] = {}
    for c in d.concepts:
        for t in c.terms:
            key = normalize(t.text)
            _add(entries, key, c.concept_id)
            if granularity is Granularity.TOKEN:
                for tok in key.split():
                    _add(entries, tok, c.concept_id)
    for cid, terms in (auxiliary or {}).items():
        for t in terms:
            _add(entries, normalize(t), cid)
    return Dictionary({k: tuple(v) for k, v in entries.items()}, granularity)


def load_auxiliary(path: str | Path) -> dict[str, list[str]]:
    """Read ``{"concept_id": ["term", ...]}`` for concepts outside the descriptor."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("auxiliary dictionary must be a JSON object")
    return {str(k): [str(t) for t in v] for k, v in obj.items()}


def recognize(article: Article, dictionary: Dictionary) -> list[ConceptOccurrence]:
    """Greedy left-to-right longest match over normalized title + abstract.

    Matches align to token boundaries and never overlap. An entry shared by
    several concepts yields one occurrence per concept over the same span.
    """
    text = normalize(article.text)
    if not text or not dictionary.entries:
        return []
    starts, ends = [], []
    for m in re.finditer(r"\S+", text):
        starts.append(m.start())
        ends.append(m.end())
    n = len(starts)
    max_len = dictionary.max_len
    out = []
    i = 0
    while i < n:
        hit = None
        for j in range(min(n, i + max_len), i, -1):
            ids = dictionary.entries.get(text[starts[i]:ends[j - 1]])
            if ids:
                hit = (j, ids)
                break
        if hit is None:
            i += 1
            continue
        j, ids = hit
        span = (starts[i], ends[j - 1])
        for cid in ids:
            out.append(ConceptOccurrence(article.pmid, cid, text[span[0]:span[1]], span))
        i = j
    return out


def recognize_corpus(corpus: Corpus, dictionary: Dictionary) -> list[ConceptOccurrence]:
    occ = []
    for a in corpus:
        occ.extend(recognize(a, dictionary))
    return sort_occurrences(occ)


def sort_occurrences(occ: Iterable[ConceptOccurrence]) -> list[ConceptOccurrence]:
    return sorted(occ, key=lambda o: (o.pmid, o.span or (-1, -1), o.concept_id))


def import_occurrences(path: str | Path, corpus: Corpus) -> list[ConceptOccurrence]:
    """Read externally produced occurrences, one JSON object per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pmid = str(obj["pmid"])
                cid = str(obj["concept_id"])
                matched = str(obj.get("matched_text") or "")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
                raise OccurrenceImportError(f"{path}:{lineno}: malformed line ({e})") from None
            if pmid not in corpus:
                raise OccurrenceImportError(f"{path}:{lineno}: unknown pmid {pmid}")
            out.append(ConceptOccurrence(pmid, cid, matched, None, Source.IMPORTED))
    return out


def occurrence_to_json(o: ConceptOccurrence) -> dict:
    obj = {"pmid": o.pmid, "concept_id": o.concept_id, "matched_text": o.matched_text,
           "source": o.source.value}
    if o.span is not None:
        obj["span"] = list(o.span)
    return obj


def save_occurrences(occ: Iterable[ConceptOccurrence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in occ:
            fh.write(json.dumps(occurrence_to_json(o), ensure_ascii=False) + "\n")


def load_occurrences(path: str | Path) -> list[ConceptOccurrence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                span = tuple(o["span"]) if "span" in o else None
                out.append(ConceptOccurrence(o["pmid"], o["concept_id"], o.get("matched_text", ""),
                                             span, Source(o.get("source", "imported"))))
    return out
