"""Knowledge-guided perturbation: synonym/concept substitution plus EDA noise.

Perturbations rewrite topical entity mentions while leaving the document's
task labels untouched, producing test sets that probe whether a classifier
relies on topical shortcuts. All randomness is seeded; per-document seeds
are derived from (spec seed, doc id) so corpus subsetting never changes an
individual document's perturbation.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import AnnotatedDocument, EntitySpan, verbalize_with_spans
from .lexicon import Lexicon
from .seeding import stable_seed

logger = logging.getLogger(__name__)


class PerturbationMode(str, Enum):
    SYNONYM = "synonym"
    CONCEPT = "concept"


@dataclass(frozen=True)
class PerturbationSpec:
    mode: PerturbationMode
    ratio: float
    eda: bool = False
    eda_ops_per_sentence: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PerturbationMode(self.mode))
        if not (0 < self.ratio <= 1):
            raise ValueError("ratio must be in (0, 1]")
        if self.eda and self.eda_ops_per_sentence < 1:
            raise ValueError("eda_ops_per_sentence must be >= 1 when eda is on")


@dataclass(frozen=True)
class AppliedSubstitution:
    """Audit record of one substitution, with offsets in source and output."""

    start: int
    end: int
    surface: str
    concept_id: str
    group: str
    operation: str
    replacement: str
    new_start: int
    new_end: int


@dataclass
class PerturbedDocument:
    """A perturbed copy of a document; PT labels are copied unchanged."""

    base: str
    text: str
    applied: list[AppliedSubstitution]
    pt_labels: set[str]
    #: entity spans remapped to the perturbed text; emptied once EDA runs
    spans: list[EntitySpan] = field(default_factory=list)


def _count_from_ratio(ratio: float, n: int) -> int:
    # ceil with a tolerance so e.g. ratio 0.3 on 10 spans gives 3, not 4
    # (0.3 * 10 is slightly above 3 in binary floating point)
    return math.ceil(ratio * n - 1e-9)


def substitute_entities(
    doc: AnnotatedDocument, lexicon: Lexicon, spec: PerturbationSpec
) -> PerturbedDocument:
    """Replace a seeded-uniform selection of ceil(ratio * n) entity spans.

    Synonym mode swaps the surface for another synonym of the same concept;
    concept mode swaps in the preferred name of a same-group alternate
    concept. Spans with no available replacement are skipped and the next
    span in the selection order is used instead. Deterministic given
    (doc, lexicon, spec).
    """
    text, spans = verbalize_with_spans(doc)
    rng = random.Random(spec.seed)
    order = list(range(len(spans)))
    rng.shuffle(order)
    wanted = _count_from_ratio(spec.ratio, len(spans))

    chosen: dict[int, tuple[str, str]] = {}  # span index -> (replacement, new concept id)
    skipped = 0
    for idx in order:
        if len(chosen) == wanted:
            break
        span = spans[idx]
        surface = text[span.start:span.end]
        if spec.mode is PerturbationMode.SYNONYM:
            candidates = lexicon.synonyms_of(span.concept_id, exclude_surface=surface)
            if not candidates:
                skipped += 1
                continue
            replacement = rng.choice(candidates)
            new_concept = span.concept_id
        else:
            alternates = lexicon.alternates_of(span.concept_id)
            if not alternates:
                skipped += 1
                continue
            new_concept = rng.choice(alternates)
            replacement = lexicon[new_concept].preferred_name
        chosen[idx] = (replacement, new_concept)
    if skipped:
        logger.debug("%s: skipped %d spans with no available replacement", doc.doc_id, skipped)

    # rebuild left to right, remapping offsets of every span
    out_parts: list[str] = []
    new_spans: list[EntitySpan] = []
    applied: list[AppliedSubstitution] = []
    cursor = 0
    shift = 0
    for idx, span in enumerate(spans):
        out_parts.append(text[cursor:span.start])
        if idx in chosen:
            replacement, new_concept = chosen[idx]
            new_start = span.start + shift
            out_parts.append(replacement)
            new_spans.append(EntitySpan(new_start, new_start + len(replacement),
                                        new_concept, lexicon[new_concept].group))
            applied.append(AppliedSubstitution(
                start=span.start, end=span.end, surface=text[span.start:span.end],
                concept_id=span.concept_id, group=span.group.value,
                operation=spec.mode.value, replacement=replacement,
                new_start=new_start, new_end=new_start + len(replacement),
            ))
            shift += len(replacement) - (span.end - span.start)
        else:
            out_parts.append(text[span.start:span.end])
            new_spans.append(EntitySpan(span.start + shift, span.end + shift,
                                        span.concept_id, span.group))
        cursor = span.end
    out_parts.append(text[cursor:])
    return PerturbedDocument(
        base=doc.doc_id,
        text="".join(out_parts),
        applied=applied,
        pt_labels=set(doc.pt_labels),
        spans=new_spans,
    )


_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")
_EDA_OPS = ("delete", "insert", "swap")


def apply_eda(text: str, ops_per_sentence: int, seed: int) -> str:
    """Apply word-level delete / duplicate-insert / swap noise per sentence.

    Each sentence receives `ops_per_sentence` operations drawn uniformly from
    the three kinds. A delete never removes a sentence's last remaining word
    (the operation becomes a no-op instead). Whitespace within affected
    sentences is normalized to single spaces. Deterministic given inputs.
    """
    if ops_per_sentence < 1:
        raise ValueError("ops_per_sentence must be >= 1")
    if not text.strip():
        return text
    rng = random.Random(seed)
    sentences = _SENTENCE_BOUNDARY.split(text)
    out_sentences = []
    for sentence in sentences:
        words = sentence.split()
        if not words:
            continue
        for _ in range(ops_per_sentence):
            op = rng.choice(_EDA_OPS)
            if op == "delete":
                if len(words) > 1:
                    del words[rng.randrange(len(words))]
            elif op == "insert":
                word = words[rng.randrange(len(words))]
                words.insert(rng.randrange(len(words) + 1), word)
            else:  # swap
                if len(words) >= 2:
                    i, j = rng.sample(range(len(words)), 2)
                    words[i], words[j] = words[j], words[i]
        out_sentences.append(" ".join(words))
    return " ".join(out_sentences)


def build_perturbed_testset(
    corpus: Sequence[AnnotatedDocument], lexicon: Lexicon, spec: PerturbationSpec
) -> list[PerturbedDocument]:
    """Perturb every document, then add EDA noise when requested.

    Output is one-to-one with the input corpus, in order. Per-document seeds
    come from hash(spec.seed, doc_id), so subsetting or reordering the corpus
    leaves each document's perturbation unchanged.
    """
    out = []
    unsubstituted = 0
    for doc in corpus:
        sub_seed = stable_seed(spec.seed, doc.doc_id, "substitute")
        perturbed = substitute_entities(doc, lexicon, replace(spec, seed=sub_seed))
        if not perturbed.applied:
            unsubstituted += 1
        if spec.eda:
            eda_seed = stable_seed(spec.seed, doc.doc_id, "eda")
            perturbed = PerturbedDocument(
                base=perturbed.base,
                text=apply_eda(perturbed.text, spec.eda_ops_per_sentence, eda_seed),
                applied=perturbed.applied,
                pt_labels=perturbed.pt_labels,
                spans=[],  # offsets are meaningless after word-level noise
            )
        out.append(perturbed)
    if unsubstituted:
        logger.info("%d/%d documents had no substitutable entity", unsubstituted, len(corpus))
    return out


# ---------------------------------------------------------------------------
# Perturbed-set files: corpus-style records with flat text plus an audit field
# ---------------------------------------------------------------------------

def save_perturbed(docs: Iterable[PerturbedDocument], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            rec = {
                "doc_id": doc.base,
                "text": doc.text,
                "pt_labels": sorted(doc.pt_labels),
                "applied": [vars(a) for a in doc.applied],
            }
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_perturbed(path: str | Path) -> list[PerturbedDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                docs.append(PerturbedDocument(
                    base=rec["doc_id"],
                    text=rec["text"],
                    applied=[AppliedSubstitution(**a) for a in rec.get("applied", [])],
                    pt_labels=set(rec.get("pt_labels", [])),
                ))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return docs
