"""Descriptor / concept / term model of a MeSH-like thesaurus entry.

A descriptor aggregates several concepts; each concept is a group of
synonymous terms. One concept is the preferred one, and exactly one concept
(``top``) is broader than all the others. The top concept is implied by the
coarse descriptor annotation itself, so it is never a prediction target.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path


class Relation(str, enum.Enum):
    PREFERRED = "preferred"
    NARROWER = "narrower"
    BROADER = "broader"
    RELATED = "related"


class ThesaurusValidationError(ValueError):
    """Raised when a descriptor file breaks a structural rule.

    Attributes:
        rule: short identifier of the violated rule.
    """

    def __init__(self, rule: str, message: str):
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


@dataclass(frozen=True)
class Term:
    text: str
    is_preferred_of_concept: bool = False


@dataclass(frozen=True)
class Concept:
    concept_id: str
    name: str
    terms: tuple[Term, ...]
    relation_to_preferred: Relation


@dataclass(frozen=True)
class Descriptor:
    descriptor_id: str
    name: str
    concepts: tuple[Concept, ...]
    preferred_concept_id: str
    top_concept_id: str

    def __post_init__(self):
        validate(self)

    @property
    def concept_ids(self) -> list[str]:
        return [c.concept_id for c in self.concepts]

    def concept(self, concept_id: str) -> Concept:
        for c in self.concepts:
            if c.concept_id == concept_id:
                return c
        raise KeyError(concept_id)


def validate(d: Descriptor) -> None:
    """Check every structural invariant, raising on the first violation."""
    if not d.descriptor_id:
        raise ThesaurusValidationError("descriptor-id", "descriptor_id is empty")
    if not d.concepts:
        raise ThesaurusValidationError("non-empty-concepts", "descriptor has no concepts")

    seen = set()
    for c in d.concepts:
        if not c.concept_id:
            raise ThesaurusValidationError("concept-id", "a concept has an empty concept_id")
        if c.concept_id in seen:
            raise ThesaurusValidationError(
                "unique-concept-ids", f"concept_id {c.concept_id!r} appears more than once")
        seen.add(c.concept_id)
        if not c.terms:
            raise ThesaurusValidationError(
                "non-empty-terms", f"concept {c.concept_id!r} has no terms")
        for t in c.terms:
            if not t.text.strip():
                raise ThesaurusValidationError(
                    "non-empty-terms", f"concept {c.concept_id!r} has a blank term")

    for ref_name, ref in (("preferred_concept_id", d.preferred_concept_id),
                          ("top_concept_id", d.top_concept_id)):
        if ref not in seen:
            raise ThesaurusValidationError(
                "references-exist", f"{ref_name} {ref!r} is not a concept of the descriptor")

    preferred = [c.concept_id for c in d.concepts if c.relation_to_preferred is Relation.PREFERRED]
    if len(preferred) != 1:
        raise ThesaurusValidationError(
            "single-preferred", f"expected exactly one preferred concept, found {len(preferred)}")
    if preferred[0] != d.preferred_concept_id:
        raise ThesaurusValidationError(
            "preferred-id-matches",
            f"concept marked preferred is {preferred[0]!r} but preferred_concept_id is "
            f"{d.preferred_concept_id!r}")

    broader = [c.concept_id for c in d.concepts if c.relation_to_preferred is Relation.BROADER]
    if len(broader) > 1:
        raise ThesaurusValidationError(
            "at-most-one-broader", f"found {len(broader)} broader concepts: {broader}")
    if broader:
        if d.top_concept_id != broader[0]:
            raise ThesaurusValidationError(
                "top-concept",
                f"top_concept_id must be the broader concept {broader[0]!r}, "
                f"got {d.top_concept_id!r}")
    else:
        if d.top_concept_id != d.preferred_concept_id:
            raise ThesaurusValidationError(
                "top-concept",
                "without a broader concept, top_concept_id must equal preferred_concept_id")
        related = [c.concept_id for c in d.concepts if c.relation_to_preferred is Relation.RELATED]
        if related:
            raise ThesaurusValidationError(
                "narrower-under-preferred-top",
                f"when the preferred concept is the top concept the others must be narrower; "
                f"related: {related}")


def fine_grained_labels(d: Descriptor) -> list[str]:
    """All concept ids except the top concept, in declaration order."""
    return [c.concept_id for c in d.concepts if c.concept_id != d.top_concept_id]


def descriptor_from_dict(obj: dict) -> Descriptor:
    try:
        concepts = []
        for c in obj["concepts"]:
            texts = list(c["terms"])
            try:
                relation = Relation(c["relation"])
            except ValueError:
                raise ThesaurusValidationError(
                    "relation-value", f"unknown relation {c['relation']!r}") from None
            concepts.append(Concept(
                concept_id=str(c["concept_id"]),
                name=str(c.get("name", texts[0] if texts else "")),
                terms=tuple(Term(str(t), i == 0) for i, t in enumerate(texts)),
                relation_to_preferred=relation,
            ))
        return Descriptor(
            descriptor_id=str(obj["descriptor_id"]),
            name=str(obj.get("name", "")),
            concepts=tuple(concepts),
            preferred_concept_id=str(obj["preferred_concept_id"]),
            top_concept_id=str(obj["top_concept_id"]),
        )
    except KeyError as e:
        raise ThesaurusValidationError("schema", f"missing field {e.args[0]!r}") from None
    except TypeError as e:
        raise ThesaurusValidationError("schema", str(e)) from None


def descriptor_to_dict(d: Descriptor) -> dict:
    return {
        "descriptor_id": d.descriptor_id,
        "name": d.name,
        "preferred_concept_id": d.preferred_concept_id,
        "top_concept_id": d.top_concept_id,
        "concepts": [
            {
                "concept_id": c.concept_id,
                "name": c.name,
                "relation": c.relation_to_preferred.value,
                "terms": [t.text for t in c.terms],
            }
            for c in d.concepts
        ],
    }


def dumps_thesaurus(d: Descriptor) -> str:
    return json.dumps(descriptor_to_dict(d), indent=2, ensure_ascii=False) + "\n"


def load_thesaurus(path: str | Path) -> Descriptor:
    """Load a descriptor JSON file and validate it.

    Raises:
        ThesaurusValidationError: on a parse failure or a violated invariant.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ThesaurusValidationError("json", f"{path}: {e}") from None
    if not isinstance(obj, dict):
        raise ThesaurusValidationError("schema", "top-level JSON value must be an object")
    return descriptor_from_dict(obj)


def save_thesaurus(d: Descriptor, path: str | Path) -> None:
    Path(path).write_text(dumps_thesaurus(d), encoding="utf-8")


def bundled_descriptor(name: str) -> Descriptor:
    """One of the descriptors shipped with the package: ``"ad"`` or ``"dmd"``."""
    from importlib import resources
    text = (resources.files("weakindex") / "data" / f"{name.lower()}.json").read_text("utf-8")
    return descriptor_from_dict(json.loads(text))
