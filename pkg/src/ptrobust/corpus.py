"""Annotated documents: verbalization, dictionary entity tagging, domain
labels, and line-delimited corpus I/O.

A document is an ordered list of (field name, text) pairs plus label and
annotation metadata. Its working text is the verbalization of those fields
("name: value" segments joined by the [SEP] token); entity span offsets
index into that verbalized string, counting Unicode scalar values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .lexicon import Lexicon, SemanticGroup

logger = logging.getLogger(__name__)

SEPARATOR_TOKEN = "[SEP]"

#: MeSH-like tree branches that may leak task information into domain labels.
DEFAULT_EXCLUDED_BRANCHES = frozenset({"E", "H", "I", "L", "N", "V"})

#: Default field order used when verbalizing a document built from scratch.
DEFAULT_TEMPLATE = ("title", "journal", "keywords", "chemicals", "abstract")


class CorpusFormatError(ValueError):
    """Raised when a corpus file or record violates the record schema."""


@dataclass(frozen=True)
class EntitySpan:
    """Character span of a lexicon concept mention in the verbalized text."""

    start: int
    end: int
    concept_id: str
    group: SemanticGroup

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise CorpusFormatError(f"invalid span [{self.start}, {self.end})")
        if not isinstance(self.group, SemanticGroup):
            object.__setattr__(self, "group", SemanticGroup(self.group))


@dataclass
class AnnotatedDocument:
    """A verbalized input with typed entity spans and label sets.

    `entity_spans` index into the document's own verbalization (its stored
    field order). `mesh_terms` are (term, tree branch letter) pairs;
    `domain_labels` is filled by :func:`build_domain_labels`.
    """

    doc_id: str
    fields: list[tuple[str, str]]
    entity_spans: list[EntitySpan] = field(default_factory=list)
    pt_labels: set[str] = field(default_factory=set)
    mesh_terms: set[tuple[str, str]] = field(default_factory=set)
    domain_labels: set[str] = field(default_factory=set)

    def text(self) -> str:
        """Verbalization in the document's own field order."""
        return verbalize(self)


@dataclass(frozen=True)
class LabelUniverse:
    """Ordered label spaces for the task head, core subset, and domain head."""

    pt_labels: tuple[str, ...]
    core_subset: frozenset[str] = frozenset()
    domain_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.pt_labels)) != len(self.pt_labels):
            raise ValueError("pt_labels contains duplicates")
        if not self.core_subset <= set(self.pt_labels):
            raise ValueError("core_subset is not a subset of pt_labels")
        if set(self.domain_labels) & set(self.pt_labels):
            raise ValueError("domain_labels must be disjoint from pt_labels")

    def check_document(self, doc: AnnotatedDocument) -> None:
        extra = doc.pt_labels - set(self.pt_labels)
        if extra:
            raise ValueError(f"{doc.doc_id}: labels outside the universe: {sorted(extra)}")


def verbalize(doc: AnnotatedDocument, template: Sequence[str] | None = None) -> str:
    """Join "field_name: text" segments with the separator token.

    Fields named by `template` but missing from the document are skipped;
    `template=None` uses the document's own field order. Deterministic.
    """
    return _verbalize_fields(_select_fields(doc, template))


def verbalize_with_spans(
    doc: AnnotatedDocument, template: Sequence[str] | None = None
) -> tuple[str, list[EntitySpan]]:
    """Verbalize and recompute entity span offsets for the new field order.

    Spans falling in fields excluded by the template are dropped. Raises
    CorpusFormatError if a stored span does not lie inside a single field's
    text segment.
    """
    selected = _select_fields(doc, template)
    own_segments = _segment_table(doc.fields)
    new_segments = _segment_table(selected)
    # text offset of each selected field in the new verbalization, keyed by
    # occurrence (field names may repeat)
    new_by_key: dict[tuple[str, int], int] = {}
    counts: dict[str, int] = {}
    for (name, _), (_, text_start, _) in zip(selected, new_segments):
        k = counts.get(name, 0)
        counts[name] = k + 1
        new_by_key[(name, k)] = text_start

    spans: list[EntitySpan] = []
    for span in sorted(doc.entity_spans, key=lambda s: s.start):
        name, occurrence, local_start = _owning_field(doc, own_segments, span)
        if (name, occurrence) not in new_by_key:
            continue  # field not selected by the template
        base = new_by_key[(name, occurrence)]
        length = span.end - span.start
        spans.append(EntitySpan(base + local_start, base + local_start + length,
                                span.concept_id, span.group))
    return _verbalize_fields(selected), spans


def _select_fields(doc: AnnotatedDocument, template: Sequence[str] | None) -> list[tuple[str, str]]:
    if template is None:
        return list(doc.fields)
    available: dict[str, list[tuple[str, str]]] = {}
    for name, text in doc.fields:
        available.setdefault(name, []).append((name, text))
    out: list[tuple[str, str]] = []
    for name in template:
        out.extend(available.get(name, ()))
    return out


def _verbalize_fields(fields: list[tuple[str, str]]) -> str:
    return f" {SEPARATOR_TOKEN} ".join(f"{name}: {text}" for name, text in fields)


def _segment_table(fields: list[tuple[str, str]]) -> list[tuple[str, int, int]]:
    """Per field: (name, offset of the field's text, end of the field's text)."""
    table = []
    pos = 0
    for i, (name, text) in enumerate(fields):
        if i > 0:
            pos += len(SEPARATOR_TOKEN) + 2  # " [SEP] "
        text_start = pos + len(name) + 2  # "name: "
        table.append((name, text_start, text_start + len(text)))
        pos = text_start + len(text)
    return table


def _owning_field(doc, segments, span) -> tuple[str, int, int]:
    counts: dict[str, int] = {}
    for name, text_start, text_end in segments:
        occurrence = counts.get(name, 0)
        counts[name] = occurrence + 1
        if text_start <= span.start and span.end <= text_end:
            return name, occurrence, span.start - text_start
    raise CorpusFormatError(
        f"{doc.doc_id}: span [{span.start}, {span.end}) does not lie inside a field text"
    )


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def tag_entities(text: str, lexicon: Lexicon) -> list[EntitySpan]:
    """Greedy left-to-right longest-match dictionary tagging.

    Case-insensitive, token-boundary aligned: a match must start and end at
    word-character boundaries. Returned spans are non-overlapping and sorted
    by start. Equal-length candidates tie-break on (surface, concept id).
    """
    if len(lexicon) == 0:
        raise ValueError("lexicon is empty")
    surfaces = sorted(
        ((s.casefold(), s, cid, grp) for s, cid, grp in lexicon.surfaces()),
        key=lambda t: (-len(t[0]), t[0], t[2]),
    )
    folded_text = text.casefold()
    spans: list[EntitySpan] = []
    i = 0
    n = len(text)
    while i < n:
        if not _is_word_char(text[i]) or (i > 0 and _is_word_char(text[i - 1])):
            i += 1
            continue
        hit = None
        for folded, _, cid, grp in surfaces:
            end = i + len(folded)
            if end > n:
                continue
            if folded_text[i:end] != folded:
                continue
            if end < n and _is_word_char(text[end]):
                continue
            hit = EntitySpan(i, end, cid, grp)
            break
        if hit is not None:
            spans.append(hit)
            i = hit.end
        else:
            i += 1
    return spans


def build_domain_labels(
    corpus: Sequence[AnnotatedDocument],
    excluded_branches: frozenset[str] | set[str] = DEFAULT_EXCLUDED_BRANCHES,
    min_doc_fraction: float = 0.01,
) -> list[str]:
    """Select auxiliary domain labels from MeSH-like terms.

    Drops terms in excluded tree branches, keeps terms whose document
    frequency is at least `min_doc_fraction` of the corpus, orders them by
    descending frequency then lexicographically, and writes the resulting
    `domain_labels` set back onto every document.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if not (0 < min_doc_fraction <= 1):
        raise ValueError("min_doc_fraction must be in (0, 1]")
    freq: dict[str, int] = {}
    for doc in corpus:
        terms = {t for t, branch in doc.mesh_terms if branch not in excluded_branches}
        for t in terms:
            freq[t] = freq.get(t, 0) + 1
    threshold = min_doc_fraction * len(corpus)
    retained = [t for t, c in freq.items() if c >= threshold]
    retained.sort(key=lambda t: (-freq[t], t))
    if not retained:
        logger.warning("no domain labels survive branch exclusion and the %.3g threshold",
                       min_doc_fraction)
    apply_domain_labels(corpus, retained, excluded_branches)
    return retained


def apply_domain_labels(
    docs: Sequence[AnnotatedDocument],
    retained: Sequence[str],
    excluded_branches: frozenset[str] | set[str] = DEFAULT_EXCLUDED_BRANCHES,
) -> None:
    """Write `domain_labels` onto documents from an already-selected term list
    (used to project the training-corpus selection onto other splits)."""
    keep = set(retained)
    for doc in docs:
        doc.domain_labels = {t for t, branch in doc.mesh_terms
                             if branch not in excluded_branches and t in keep}


# ---------------------------------------------------------------------------
# Line-delimited corpus files
# ---------------------------------------------------------------------------

def _doc_to_record(doc: AnnotatedDocument) -> dict:
    rec = {
        "doc_id": doc.doc_id,
        "fields": [[name, text] for name, text in doc.fields],
        "entities": [
            {"start": s.start, "end": s.end, "concept_id": s.concept_id,
             "group": s.group.value}
            for s in sorted(doc.entity_spans, key=lambda s: (s.start, s.end))
        ],
        "pt_labels": sorted(doc.pt_labels),
        "mesh": [[t, b] for t, b in sorted(doc.mesh_terms)],
    }
    if doc.domain_labels:
        rec["domain_labels"] = sorted(doc.domain_labels)
    return rec


def _record_to_doc(rec: dict, lineno: int) -> AnnotatedDocument:
    def require(key):
        if key not in rec:
            raise CorpusFormatError(f"line {lineno}: missing field {key!r}")
        return rec[key]

    doc_id = require("doc_id")
    fields = [(str(n), str(t)) for n, t in require("fields")]
    spans = []
    for ent in rec.get("entities", []):
        try:
            spans.append(EntitySpan(int(ent["start"]), int(ent["end"]),
                                    str(ent["concept_id"]), SemanticGroup(ent["group"])))
        except (KeyError, ValueError) as exc:
            raise CorpusFormatError(f"line {lineno}: bad entity in {doc_id!r}: {exc}") from None
    doc = AnnotatedDocument(
        doc_id=str(doc_id),
        fields=fields,
        entity_spans=spans,
        pt_labels=set(rec.get("pt_labels", [])),
        mesh_terms={(str(t), str(b)) for t, b in rec.get("mesh", [])},
        domain_labels=set(rec.get("domain_labels", [])),
    )
    text_len = len(doc.text())
    for s in spans:
        if s.end > text_len:
            raise CorpusFormatError(
                f"doc {doc_id!r}: span [{s.start}, {s.end}) exceeds verbalized length {text_len}"
            )
    return doc


def load_corpus(path: str | Path) -> list[AnnotatedDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: not valid JSON ({exc})") from None
            docs.append(_record_to_doc(rec, lineno))
    return docs


def save_corpus(docs: Iterable[AnnotatedDocument], path: str | Path) -> None:
    """Write documents one JSON record per line; save/load round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(_doc_to_record(doc), ensure_ascii=False,
                                separators=(",", ":")) + "\n")
