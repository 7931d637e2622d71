"""Masked-entity training preprocessing: typed-marker replacement and
ratio-controlled instance selection."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

from .corpus import AnnotatedDocument, EntitySpan, verbalize_with_spans, _segment_table
from .lexicon import Lexicon, marker_for


@dataclass(frozen=True)
class MaskingSpec:
    instance_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.instance_ratio <= 1):
            raise ValueError("instance_ratio must be in (0, 1]")


def mask_document(doc: AnnotatedDocument, lexicon: Lexicon) -> AnnotatedDocument:
    """Replace every entity span with its group's typed marker.

    The returned document keeps the original field structure; new spans cover
    the marker tokens with their original concept ids and groups, which makes
    the operation idempotent.
    """
    for span in doc.entity_spans:
        concept = lexicon[span.concept_id]
        if concept.group is not span.group:
            raise ValueError(f"{doc.doc_id}: span group {span.group} does not match "
                             f"lexicon group {concept.group} for {span.concept_id}")
    text, spans = verbalize_with_spans(doc)
    segments = _segment_table(doc.fields)

    # group spans by owning field, in local coordinates
    per_field: dict[int, list[tuple[int, int, EntitySpan]]] = {}
    for span in spans:
        for fi, (_, text_start, text_end) in enumerate(segments):
            if text_start <= span.start and span.end <= text_end:
                per_field.setdefault(fi, []).append(
                    (span.start - text_start, span.end - text_start, span))
                break

    new_fields: list[tuple[str, str]] = []
    new_local: dict[int, list[tuple[int, int, EntitySpan]]] = {}
    for fi, (name, field_text) in enumerate(doc.fields):
        shift = 0
        parts = []
        cursor = 0
        locals_here = []
        for local_start, local_end, span in sorted(per_field.get(fi, ())):
            marker = marker_for(span.group)
            parts.append(field_text[cursor:local_start])
            parts.append(marker)
            locals_here.append((local_start + shift, local_start + shift + len(marker), span))
            shift += len(marker) - (local_end - local_start)
            cursor = local_end
        parts.append(field_text[cursor:])
        new_fields.append((name, "".join(parts)))
        new_local[fi] = locals_here

    masked = AnnotatedDocument(
        doc_id=doc.doc_id,
        fields=new_fields,
        entity_spans=[],
        pt_labels=set(doc.pt_labels),
        mesh_terms=set(doc.mesh_terms),
        domain_labels=set(doc.domain_labels),
    )
    new_segments = _segment_table(new_fields)
    new_spans = []
    for fi, locals_here in new_local.items():
        base = new_segments[fi][1]
        for local_start, local_end, span in locals_here:
            new_spans.append(EntitySpan(base + local_start, base + local_end,
                                        span.concept_id, span.group))
    masked.entity_spans = sorted(new_spans, key=lambda s: s.start)
    return masked


def select_masked_indices(n_docs: int, instance_ratio: float, seed: int) -> list[int]:
    """Seeded selection of floor(ratio * n) document indices.

    Implemented as a prefix of one seeded permutation, so selections under a
    shared seed are nested across ratios (0.3 within 0.5 within 1.0).
    """
    order = list(range(n_docs))
    random.Random(seed).shuffle(order)
    # floor with a tolerance: 0.7 * 10 is slightly below 7 in floating point
    count = math.floor(instance_ratio * n_docs + 1e-9)
    return sorted(order[:count])


def build_masked_training_set(
    corpus: Sequence[AnnotatedDocument], lexicon: Lexicon, spec: MaskingSpec
) -> list[AnnotatedDocument]:
    """Mask a seeded selection of instances, keep the rest verbatim.

    The selection is fixed once at construction time (not resampled per
    epoch) and masks exactly floor(instance_ratio * len(corpus)) documents.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    chosen = set(select_masked_indices(len(corpus), spec.instance_ratio, spec.seed))
    return [mask_document(doc, lexicon) if i in chosen else doc
            for i, doc in enumerate(corpus)]
