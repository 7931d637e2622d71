"""Concept lexicon: semantic groups, synonym sets, and typed mask markers.

A lexicon maps concept ids to surface forms (synonyms) within one of six
coarse semantic groups. It backs entity tagging, synonym/concept
substitution, and typed-marker masking. Lexicons are immutable after load
and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class SemanticGroup(str, Enum):
    """The six topical groups whose entities may be perturbed or masked."""

    CHEMICALS_AND_DRUGS = "ChemicalsAndDrugs"
    ANATOMY = "Anatomy"
    DISORDERS = "Disorders"
    GENES = "GenesAndMolecularSequences"
    GEOGRAPHIC_AREAS = "GeographicAreas"
    PHYSIOLOGY = "Physiology"


_MARKERS = {
    SemanticGroup.CHEMICALS_AND_DRUGS: "[CHEMICAL]",
    SemanticGroup.ANATOMY: "[ANATOMY]",
    SemanticGroup.DISORDERS: "[DISORDER]",
    SemanticGroup.GENES: "[GENE]",
    SemanticGroup.GEOGRAPHIC_AREAS: "[GEOGRAPHIC]",
    SemanticGroup.PHYSIOLOGY: "[PHYSIOLOGY]",
}

MARKER_TOKENS: tuple[str, ...] = tuple(_MARKERS[g] for g in SemanticGroup)


def marker_for(group: SemanticGroup | str) -> str:
    """Typed placeholder token for entities of `group`, e.g. "[CHEMICAL]"."""
    return _MARKERS[SemanticGroup(group)]


class LexiconError(ValueError):
    """Malformed lexicon content (file format or invariant violation)."""


class UnknownConceptError(KeyError):
    """A concept id was requested that the lexicon does not contain."""


@dataclass(frozen=True)
class Concept:
    """One concept: an id, its group, and its surface forms.

    The preferred name must itself be one of the synonyms; synonyms are
    non-empty and pairwise distinct after case-folding.
    """

    concept_id: str
    group: SemanticGroup
    preferred_name: str
    synonyms: tuple[str, ...]

    def __post_init__(self):
        if not self.concept_id:
            raise LexiconError("concept_id must be non-empty")
        if not self.synonyms:
            raise LexiconError(f"{self.concept_id}: concept has no synonyms")
        folded = [s.casefold() for s in self.synonyms]
        if any(not s for s in self.synonyms):
            raise LexiconError(f"{self.concept_id}: empty synonym")
        if len(set(folded)) != len(folded):
            raise LexiconError(f"{self.concept_id}: synonyms not distinct after case-folding")
        if self.preferred_name.casefold() not in folded:
            raise LexiconError(
                f"{self.concept_id}: preferred name {self.preferred_name!r} is not a synonym"
            )


class Lexicon:
    """Immutable concept store with per-group indices.

    `by_group` lists concept ids sorted lexicographically so that seeded
    random choices over synonyms/alternates are reproducible across
    platforms and input file orderings.
    """

    def __init__(self, concepts: Iterable[Concept]):
        self.concepts: dict[str, Concept] = {}
        for c in concepts:
            if c.concept_id in self.concepts:
                raise LexiconError(f"duplicate concept id {c.concept_id!r}")
            self.concepts[c.concept_id] = c
        self.by_group: dict[SemanticGroup, list[str]] = {g: [] for g in SemanticGroup}
        for cid in sorted(self.concepts):
            self.by_group[self.concepts[cid].group].append(cid)

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.concepts

    def __getitem__(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise UnknownConceptError(concept_id) from None

    def surfaces(self) -> Iterator[tuple[str, str, SemanticGroup]]:
        """Yield (surface, concept_id, group) for every synonym, sorted by id."""
        for cid in sorted(self.concepts):
            c = self.concepts[cid]
            for s in c.synonyms:
                yield s, cid, c.group

    def synonyms_of(self, concept_id: str, exclude_surface: str | None = None) -> list[str]:
        """All synonyms of a concept, lexicographically sorted, minus any
        synonym case-insensitively equal to `exclude_surface`."""
        concept = self[concept_id]
        excl = exclude_surface.casefold() if exclude_surface is not None else None
        return sorted(s for s in concept.synonyms if s.casefold() != excl)

    def alternates_of(self, concept_id: str) -> list[str]:
        """Ids of all other concepts in the same group, in stable sorted order."""
        concept = self[concept_id]
        return [cid for cid in self.by_group[concept.group] if cid != concept_id]


def load_lexicon(path: str | Path) -> Lexicon:
    """Parse the tab-separated lexicon format.

    One concept per line: concept_id <TAB> group <TAB> preferred_name
    <TAB> synonym1|synonym2|...
    """
    concepts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise LexiconError(f"{path}:{lineno}: expected 4 tab-separated columns")
            cid, group_name, preferred, syn_field = parts
            try:
                group = SemanticGroup(group_name)
            except ValueError:
                raise LexiconError(f"{path}:{lineno}: unknown group {group_name!r}") from None
            synonyms = tuple(s for s in syn_field.split("|") if s)
            try:
                concepts.append(Concept(cid, group, preferred, synonyms))
            except LexiconError as exc:
                raise LexiconError(f"{path}:{lineno}: {exc}") from None
    if not concepts:
        raise LexiconError(f"{path}: lexicon is empty")
    return Lexicon(concepts)


def save_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cid in sorted(lexicon.concepts):
            c = lexicon.concepts[cid]
            fh.write(f"{cid}\t{c.group.value}\t{c.preferred_name}\t{'|'.join(c.synonyms)}\n")
