"""Synthetic corpora with planted topical shortcuts.

Every task label has a multi-token methodological cue phrase (the genuine
signal, present with probability mu in labeled documents) and a designated
shortcut entity. In the training split the shortcut co-occurs with its label
with probability rho; validation and test splits draw all entities at
label-independent base rates, so any residual reliance on shortcuts shows up
as degradation once those entities are perturbed.

Mesh-like topic terms track which semantic groups' entities appear in a
document, giving the domain-adversarial head something to predict; decoy
terms in excluded branches exercise the domain-label filter.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import AnnotatedDocument, tag_entities, verbalize
from .lexicon import Concept, Lexicon, SemanticGroup
from .seeding import stable_seed

_CUE_WORDS = (
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
    "iota", "kappa", "lambda", "omicron", "sigma", "upsilon", "omega", "rho",
)

# surface-building stems per group; chosen to never collide with cue words
# or filler tokens
_GROUP_STEMS = {
    SemanticGroup.CHEMICALS_AND_DRUGS: ("chemox", "compound"),
    SemanticGroup.ANATOMY: ("organum", "tissue"),
    SemanticGroup.DISORDERS: ("malady", "syndrome"),
    SemanticGroup.GENES: ("genix", "locus"),
    SemanticGroup.GEOGRAPHIC_AREAS: ("regiona", "territory"),
    SemanticGroup.PHYSIOLOGY: ("physion", "process"),
}

_GROUPS = tuple(SemanticGroup)


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 800
    n_pt_labels: int = 8
    n_domain_labels: int = 6
    shortcut_strength: float = 0.9   # P(shortcut entity | its label), train split
    method_cue_rate: float = 0.8     # P(cue phrase | label), all splits
    label_rate: float = 0.25         # per-label Bernoulli rate
    concepts_per_group: int = 5
    n_filler_tokens: int = 150
    fillers_per_doc: tuple[int, int] = (18, 30)
    neutral_entities_per_doc: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test, self.n_pt_labels,
               self.n_domain_labels, self.concepts_per_group, self.n_filler_tokens) < 1:
            raise ValueError("all sizes must be >= 1")
        if not (0 <= self.shortcut_strength <= 1 and 0 <= self.method_cue_rate <= 1):
            raise ValueError("shortcut_strength and method_cue_rate must be in [0, 1]")
        if self.n_pt_labels > len(_CUE_WORDS):
            raise ValueError(f"at most {len(_CUE_WORDS)} task labels supported")
        if self.n_domain_labels > len(_GROUPS):
            raise ValueError(f"at most {len(_GROUPS)} domain topics supported")


@dataclass
class SyntheticDataset:
    train: list[AnnotatedDocument]
    val: list[AnnotatedDocument]
    test: list[AnnotatedDocument]
    lexicon: Lexicon
    pt_labels: list[str]
    #: label -> its methodological cue phrase (verbatim multi-token string)
    phrases: dict[str, str] = field(default_factory=dict)
    #: label -> concept id of its planted shortcut entity
    shortcuts: dict[str, str] = field(default_factory=dict)


def _build_lexicon(spec: SyntheticSpec) -> Lexicon:
    concepts = []
    for g_idx, group in enumerate(_GROUPS):
        stem, noun = _GROUP_STEMS[group]
        for i in range(spec.concepts_per_group):
            cid = f"SYN{g_idx}{i:03d}"
            # every surface starts with a concept-unique head token, so
            # adjacent mentions can never merge into a longer dictionary match
            head = f"{stem}{i}"
            preferred = f"{head} {noun}"
            synonyms = (preferred, f"{head} variant {noun}")
            concepts.append(Concept(cid, group, preferred, synonyms))
    return Lexicon(concepts)


def _label_names(spec: SyntheticSpec) -> list[str]:
    return [f"design-{_CUE_WORDS[k]}" for k in range(spec.n_pt_labels)]


def _phrase_for(label_idx: int) -> str:
    return f"{_CUE_WORDS[label_idx]} protocol design"


def _make_doc(spec: SyntheticSpec, lexicon: Lexicon, split: str, idx: int,
              pt_labels: list[str], shortcuts: dict[str, str],
              topic_terms: dict[SemanticGroup, str]) -> AnnotatedDocument:
    rng = random.Random(stable_seed(spec.seed, split, idx))
    gold = {lab for lab in pt_labels if rng.random() < spec.label_rate}

    chunks: list[str] = []
    n_fill = rng.randint(*spec.fillers_per_doc)
    chunks.extend(f"filler{rng.randrange(spec.n_filler_tokens):03d}" for _ in range(n_fill))

    for k, lab in enumerate(pt_labels):
        if lab in gold and rng.random() < spec.method_cue_rate:
            chunks.append(_phrase_for(k))

    planted: list[str] = []
    if split == "train":
        # shortcuts co-occur with their labels; no background occurrences
        for lab in pt_labels:
            if lab in gold and rng.random() < spec.shortcut_strength:
                planted.append(shortcuts[lab])
    else:
        # label-independent draws at the training marginal rate
        base = spec.shortcut_strength * spec.label_rate
        for lab in pt_labels:
            if rng.random() < base:
                planted.append(shortcuts[lab])
    non_shortcut = [cid for cid in sorted(lexicon.concepts)
                    if cid not in set(shortcuts.values())]
    for _ in range(rng.randint(*spec.neutral_entities_per_doc)):
        planted.append(rng.choice(non_shortcut))
    for cid in planted:
        chunks.append(rng.choice(lexicon.synonyms_of(cid)))

    rng.shuffle(chunks)
    title = " ".join(f"filler{rng.randrange(spec.n_filler_tokens):03d}" for _ in range(4))
    abstract = " ".join(chunks) + "."

    mesh = {(topic_terms[lexicon[cid].group], "C") for cid in planted
            if lexicon[cid].group in topic_terms}
    if rng.random() < 0.5:
        mesh.add(("methodology workup", "E"))  # excluded-branch decoy

    doc = AnnotatedDocument(
        doc_id=f"{split}-{idx:05d}",
        fields=[("title", title), ("abstract", abstract)],
        pt_labels=gold,
        mesh_terms=mesh,
    )
    doc.entity_spans = tag_entities(verbalize(doc), lexicon)
    return doc


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate (train, val, test) corpora plus their lexicon, seeded.

    Training documents carry label-correlated shortcut entities; validation
    and test documents draw every entity independently of the labels, so the
    mutual information between shortcut presence and gold labels is zero by
    construction outside the training split.
    """
    lexicon = _build_lexicon(spec)
    pt_labels = _label_names(spec)
    # one shortcut concept per label, rotating over groups: concept 0 of the
    # group is reserved for shortcut duty
    shortcuts = {}
    per_group_next: dict[SemanticGroup, int] = {g: 0 for g in _GROUPS}
    for k, lab in enumerate(pt_labels):
        group = _GROUPS[k % len(_GROUPS)]
        slot = per_group_next[group]
        per_group_next[group] += 1
        if slot >= spec.concepts_per_group:
            raise ValueError("not enough concepts per group for the requested labels")
        shortcuts[lab] = f"SYN{_GROUPS.index(group)}{slot:03d}"

    topic_groups = _GROUPS[: spec.n_domain_labels]
    topic_terms = {g: f"topic {g.value.lower()}" for g in topic_groups}

    splits = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        splits[split] = [
            _make_doc(spec, lexicon, split, i, pt_labels, shortcuts, topic_terms)
            for i in range(count)
        ]
    return SyntheticDataset(
        train=splits["train"], val=splits["val"], test=splits["test"],
        lexicon=lexicon, pt_labels=pt_labels,
        phrases={lab: _phrase_for(k) for k, lab in enumerate(pt_labels)},
        shortcuts=shortcuts,
    )
