"""Desk-scale multi-label classifier with a gradient-reversal domain head.

Architecture: a mean-pooled token-embedding encoder shared by a linear task
head and a linear domain head. The domain branch passes through a gradient
reversal layer, so the encoder is trained to make domain labels hard to
predict while the domain head itself is trained to predict them.

Everything runs in float64 on CPU with explicit seeding; two runs with the
same inputs produce bit-identical weights.

Gradient contract (what the optimizer steps follow):

* task head and domain head descend
  ``L_asl + alpha * L_unsup + beta * L_sup + lambda(p) * L_domain``;
* the encoder descends the same expression with the domain term's sign
  flipped, which is what the reversal layer implements;
* baseline and mask strategies have no domain term at all, which makes a
  lambda_max = 0 adversarial run exactly equal to a baseline run.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import AnnotatedDocument
from .lexicon import MARKER_TOKENS
from .masking import MaskingSpec, build_masked_training_set
from .metrics import PredictionRecord, PredictionSet, prf
from .seeding import stable_seed

UNKNOWN_TOKEN = "[UNK]"
SEPARATOR = "[SEP]"

_TOKEN_RE = re.compile(r"\[[A-Za-z]+\]|[A-Za-z0-9_']+")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite during epoch {epoch}")
        self.epoch = epoch


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; bracketed marker tokens are kept verbatim."""
    return [t if t.startswith("[") else t.lower() for t in _TOKEN_RE.findall(text)]


class Vocabulary:
    """Token-to-index map with reserved special tokens.

    Index 0 is the unknown token; the separator and the six typed markers are
    always present regardless of corpus frequency.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if self.tokens[0] != UNKNOWN_TOKEN:
            raise ValueError("index 0 must be the unknown token")
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for tokens in token_lists:
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
        specials = [UNKNOWN_TOKEN, SEPARATOR, *MARKER_TOKENS]
        rest = sorted(
            (t for t, c in counts.items() if c >= min_freq and t not in specials),
            key=lambda t: (-counts[t], t),
        )
        return cls(specials + rest)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]


@dataclass(frozen=True)
class HyperParams:
    embed_dim: int = 64
    # asymmetric loss
    gamma_neg: float = 4.0
    gamma_pos: float = 1.0
    margin: float = 0.05
    label_smoothing: float = 0.05
    prob_eps: float = 1e-7
    # contrastive terms
    alpha_unsup: float = 0.1
    beta_sup: float = 0.1
    temperature: float = 0.1
    view_dropout: float = 0.1
    # adversarial schedule
    lambda_max: float = 0.5
    # optimization (defaults tuned for the desk-scale encoder)
    lr_encoder: float = 0.05
    lr_heads: float = 0.1
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 4
    optimizer: str = "radam"
    # decision threshold and vocabulary
    tau: float = 0.5
    min_token_freq: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.gamma_neg >= self.gamma_pos >= 0):
            raise ValueError("need gamma_neg >= gamma_pos >= 0")
        if not (0 <= self.margin < 1):
            raise ValueError("margin must be in [0, 1)")
        if not (0 <= self.label_smoothing < 1):
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if not (0 < self.tau < 1):
            raise ValueError("tau must be in (0, 1)")
        if self.optimizer not in ("radam", "adam"):
            raise ValueError("optimizer must be 'radam' or 'adam'")


STRATEGY_KINDS = ("baseline", "mask", "adversarial", "mask-adversarial")


@dataclass(frozen=True)
class TrainingStrategy:
    kind: str
    masking: MaskingSpec | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")

    @property
    def uses_masking(self) -> bool:
        return self.kind in ("mask", "mask-adversarial")

    @property
    def uses_adversarial(self) -> bool:
        return self.kind in ("adversarial", "mask-adversarial")


class ModelState:
    """Embedding table plus the two linear heads, all float64 leaf tensors."""

    PARAM_NAMES = ("E", "W_task", "b_task", "W_dom", "b_dom")

    def __init__(self, vocab: Vocabulary, pt_labels: Sequence[str],
                 domain_labels: Sequence[str], hyper: HyperParams, strategy_kind: str,
                 weights: dict[str, torch.Tensor] | None = None):
        self.vocab = vocab
        self.pt_labels = list(pt_labels)
        self.domain_labels = list(domain_labels)
        self.hyper = hyper
        self.strategy_kind = strategy_kind
        d = hyper.embed_dim
        if weights is None:
            g = torch.Generator().manual_seed(hyper.seed % 2 ** 63)
            scale = 1.0 / math.sqrt(d)

            def uniform(*shape):
                return (torch.rand(*shape, generator=g, dtype=torch.float64) * 2 - 1) * scale

            weights = {
                "E": uniform(len(vocab), d),
                "W_task": uniform(d, len(self.pt_labels)),
                "b_task": torch.zeros(len(self.pt_labels), dtype=torch.float64),
                "W_dom": uniform(d, len(self.domain_labels)),
                "b_dom": torch.zeros(len(self.domain_labels), dtype=torch.float64),
            }
        for name in self.PARAM_NAMES:
            t = weights[name].detach().clone().double()
            t.requires_grad_(True)
            setattr(self, name, t)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def clone_weights(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).detach().clone() for name in self.PARAM_NAMES}

    def load_weights(self, weights: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name in self.PARAM_NAMES:
                getattr(self, name).copy_(weights[name])


def encode(state: ModelState, token_ids: Sequence[int]) -> torch.Tensor:
    """Mean of the embedding rows; the empty sequence maps to the zero vector."""
    if len(token_ids) == 0:
        return torch.zeros(state.hyper.embed_dim, dtype=torch.float64)
    return state.E[list(token_ids)].mean(dim=0)


def lambda_schedule(p: float, lambda_max: float) -> float:
    """Sigmoid-shaped ramp of the adversarial weight over training progress."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be in [0, 1]")
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def asl_loss(probs: torch.Tensor, targets: torch.Tensor, hyper: HyperParams) -> torch.Tensor:
    """Asymmetric multi-label loss with label smoothing.

    With smoothed targets y' = y (1 - a) + a/2: the positive part is
    y' (1-p)^g+ (-log p); the negative part is (1-y') pm^g- (-log(1-pm))
    with pm = max(p - margin, 0). Sum over labels, mean over the batch.
    Setting all four shaping parameters to zero reduces this exactly to
    binary cross-entropy.
    """
    if torch.isnan(probs).any() or torch.isnan(targets).any():
        raise ValueError("NaN in asymmetric-loss inputs")
    eps = hyper.prob_eps
    p = probs.clamp(eps, 1.0 - eps)
    y = targets * (1.0 - hyper.label_smoothing) + hyper.label_smoothing / 2.0
    positive = y * (1.0 - p) ** hyper.gamma_pos * (-torch.log(p))
    pm = (p - hyper.margin).clamp(min=0.0)
    negative = (1.0 - y) * pm ** hyper.gamma_neg * (-torch.log((1.0 - pm).clamp(min=eps)))
    return (positive + negative).sum(dim=1).mean()


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=1, keepdim=True) + 1e-12)


def contrastive_losses(embeddings: torch.Tensor, view1: torch.Tensor, view2: torch.Tensor,
                       label_sets: Sequence[frozenset], temperature: float
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """(unsupervised, supervised) contrastive terms over one batch.

    The unsupervised term is InfoNCE over the two stochastic views of each
    document. The supervised term treats batch members sharing at least one
    task label as positives, weighted by the Jaccard overlap of their label
    sets. Both use cosine similarity scaled by the temperature. Degenerate
    batches (size < 2, or no positive pair) contribute zero.
    """
    b = embeddings.shape[0]
    zero = torch.zeros((), dtype=embeddings.dtype)
    if b < 2:
        return zero, zero

    z = _normalize(torch.cat([view1, view2], dim=0))
    sim = z @ z.T / temperature
    eye = torch.eye(2 * b, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    positive_idx = torch.arange(2 * b).roll(b)
    log_denom = torch.logsumexp(sim, dim=1)
    l_unsup = -(sim[torch.arange(2 * b), positive_idx] - log_denom).mean()

    zs = _normalize(embeddings)
    sims = zs @ zs.T / temperature
    sims = sims.masked_fill(torch.eye(b, dtype=torch.bool), float("-inf"))
    weights = _jaccard_weights(label_sets, embeddings.dtype)
    anchors = weights.sum(dim=1) > 0
    if not bool(anchors.any()):
        return l_unsup, zero
    log_prob = sims - torch.logsumexp(sims, dim=1, keepdim=True)
    w = weights[anchors] / weights[anchors].sum(dim=1, keepdim=True)
    l_sup = -(w * log_prob[anchors].masked_fill(w == 0, 0.0)).sum(dim=1).mean()
    return l_unsup, l_sup


def _jaccard_weights(label_sets: Sequence[frozenset], dtype) -> torch.Tensor:
    """Pairwise Jaccard overlap of label sets, zero on the diagonal."""
    b = len(label_sets)
    universe = sorted(set().union(*label_sets)) if label_sets else []
    if not universe:
        return torch.zeros(b, b, dtype=dtype)
    index = {lab: i for i, lab in enumerate(universe)}
    y = torch.zeros(b, len(universe), dtype=dtype)
    for i, labels in enumerate(label_sets):
        for lab in labels:
            y[i, index[lab]] = 1.0
    inter = y @ y.T
    sizes = y.sum(dim=1)
    union = sizes.unsqueeze(0) + sizes.unsqueeze(1) - inter
    weights = torch.where(inter > 0, inter / union.clamp(min=1.0), torch.zeros_like(inter))
    return weights.masked_fill(torch.eye(b, dtype=torch.bool), 0.0)


class _GradientReversal(torch.autograd.Function):
    """Identity forward; multiplies the backpropagated gradient by -1."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -grad_output


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    return _GradientReversal.apply(x)


@dataclass
class TrainBatch:
    doc_ids: list[str]
    counts: torch.Tensor        # (B, |V|) token occurrence counts
    bag: torch.Tensor           # counts normalized to mean-pooling weights
    pt_targets: torch.Tensor    # (B, L_pt) multi-hot
    domain_targets: torch.Tensor  # (B, L_dom) multi-hot
    label_sets: list[frozenset]


def _count_matrix(id_lists: Sequence[Sequence[int]], vocab_size: int) -> torch.Tensor:
    m = torch.zeros(len(id_lists), vocab_size, dtype=torch.float64)
    for i, ids in enumerate(id_lists):
        if ids:
            m[i].index_add_(0, torch.tensor(ids, dtype=torch.long),
                            torch.ones(len(ids), dtype=torch.float64))
    return m


def _to_bag(counts: torch.Tensor, fallback: torch.Tensor | None = None) -> torch.Tensor:
    totals = counts.sum(dim=1, keepdim=True)
    if fallback is not None:
        empty = totals.squeeze(1) == 0
        if bool(empty.any()):
            counts = torch.where(empty.unsqueeze(1), fallback, counts)
            totals = counts.sum(dim=1, keepdim=True)
    return counts / totals.clamp(min=1.0)


def _view_counts(counts: torch.Tensor, dropout: float, view_seed: int
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Two stochastic views of each document via per-occurrence token dropout.

    A view that would drop every token falls back to the full document.
    """
    if dropout <= 0:
        return counts, counts
    g = torch.Generator().manual_seed(view_seed % 2 ** 63)
    keep = torch.full_like(counts, 1.0 - dropout)
    v1 = torch.binomial(counts, keep, generator=g)
    v2 = torch.binomial(counts, keep, generator=g)
    return v1, v2


@dataclass
class LossOutput:
    total: float
    components: dict[str, float]
    grads: dict[str, torch.Tensor]


def total_loss(state: ModelState, batch: TrainBatch, strategy: TrainingStrategy,
               p: float, view_seed: int = 0) -> LossOutput:
    """Composite loss value and analytic gradients for one batch.

    The returned gradients follow the gradient-reversal contract: the domain
    term's gradient reaching the embedding table is sign-flipped, while the
    domain head's own gradient is not. Baseline and mask strategies carry no
    domain term. Deterministic given (state, batch, strategy, p, view_seed).
    """
    value, comps = _loss_graph(state, batch, strategy, p, view_seed, reverse=True)
    if not math.isfinite(float(value.detach())):
        raise ValueError("non-finite loss")
    params = state.parameters()
    grad_list = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    grads = {name: (g if g is not None else torch.zeros_like(params[name]))
             for name, g in zip(params, grad_list)}
    return LossOutput(float(value), comps, grads)


def _loss_graph(state, batch, strategy, p, view_seed, reverse, domain_sign=1.0):
    hyper = state.hyper
    if not (0.0 <= p <= 1.0):
        raise ValueError("training progress p must be in [0, 1]")
    if batch.pt_targets.shape[1] != len(state.pt_labels):
        raise ValueError("task target width does not match the label universe")
    emb = batch.bag @ state.E
    logits = emb @ state.W_task + state.b_task
    probs = torch.sigmoid(logits)
    l_asl = asl_loss(probs, batch.pt_targets, hyper)
    v1, v2 = _view_counts(batch.counts, hyper.view_dropout, view_seed)
    l_unsup, l_sup = contrastive_losses(
        emb, _to_bag(v1, batch.counts) @ state.E, _to_bag(v2, batch.counts) @ state.E,
        batch.label_sets, hyper.temperature)
    task = l_asl + hyper.alpha_unsup * l_unsup + hyper.beta_sup * l_sup

    lam = lambda_schedule(p, hyper.lambda_max) if strategy.uses_adversarial else 0.0
    comps = {"asl": float(l_asl.detach()), "unsup": float(l_unsup.detach()),
             "sup": float(l_sup.detach()), "domain": 0.0, "lambda": lam}
    if lam == 0.0 or len(state.domain_labels) == 0:
        return task, comps
    if batch.domain_targets.shape[1] != len(state.domain_labels):
        raise ValueError("domain target width does not match the domain universe")
    dom_in = grad_reverse(emb) if reverse else emb
    dom_probs = torch.sigmoid(dom_in @ state.W_dom + state.b_dom)
    l_dom = _binary_ce(dom_probs, batch.domain_targets, hyper.prob_eps)
    comps["domain"] = float(l_dom.detach())
    return task + domain_sign * lam * l_dom, comps


def _binary_ce(probs: torch.Tensor, targets: torch.Tensor, eps: float) -> torch.Tensor:
    p = probs.clamp(eps, 1.0 - eps)
    ce = -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p))
    return ce.sum(dim=1).mean()


def evaluate_loss(state: ModelState, batch: TrainBatch, strategy: TrainingStrategy,
                  p: float, view_seed: int = 0, domain_sign: float = 1.0) -> float:
    """Loss value only, with a sign knob on the domain term.

    Under gradient reversal there is no single scalar whose gradient every
    block follows: heads descend task + lambda * domain, the encoder descends
    task - lambda * domain. Finite-difference checks therefore evaluate with
    domain_sign=+1 for head parameters and domain_sign=-1 for the embedding
    table.
    """
    with torch.no_grad():
        value, _ = _loss_graph(state, batch, strategy, p, view_seed,
                               reverse=False, domain_sign=domain_sign)
    return float(value)


def domain_gradients(state: ModelState, batch: TrainBatch, lam: float, reverse: bool
                     ) -> dict[str, torch.Tensor]:
    """Gradients of lam * L_domain alone, with or without gradient reversal.

    Diagnostic used to verify the reversal contract: with the domain term
    isolated, the encoder gradient with reversal equals -lam times the
    no-reversal gradient at lam=1, while domain-head gradients are identical
    whether or not the reversal layer is present.
    """
    emb = batch.bag @ state.E
    dom_in = grad_reverse(emb) if reverse else emb
    dom_probs = torch.sigmoid(dom_in @ state.W_dom + state.b_dom)
    loss = lam * _binary_ce(dom_probs, batch.domain_targets, state.hyper.prob_eps)
    names = ("E", "W_dom", "b_dom")
    grad_list = torch.autograd.grad(loss, [getattr(state, n) for n in names],
                                    allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(getattr(state, n)))
            for n, g in zip(names, grad_list)}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _document_text(doc) -> str:
    if isinstance(doc, AnnotatedDocument):
        return doc.text()
    if isinstance(doc, str):
        return doc
    return doc.text


def _document_labels(doc) -> set[str]:
    return set(getattr(doc, "pt_labels", set()))


def _document_id(doc) -> str:
    return getattr(doc, "doc_id", None) or getattr(doc, "base", "")


def _prepare_batch(docs, id_lists, vocab, pt_index, dom_index) -> TrainBatch:
    counts = _count_matrix(id_lists, len(vocab))
    pt_targets = torch.zeros(len(docs), len(pt_index), dtype=torch.float64)
    dom_targets = torch.zeros(len(docs), len(dom_index), dtype=torch.float64)
    label_sets = []
    for i, doc in enumerate(docs):
        labels = frozenset(lab for lab in _document_labels(doc) if lab in pt_index)
        label_sets.append(labels)
        for lab in labels:
            pt_targets[i, pt_index[lab]] = 1.0
        for lab in getattr(doc, "domain_labels", ()):  # perturbed docs carry none
            if lab in dom_index:
                dom_targets[i, dom_index[lab]] = 1.0
    return TrainBatch(
        doc_ids=[_document_id(d) for d in docs],
        counts=counts,
        bag=_to_bag(counts),
        pt_targets=pt_targets,
        domain_targets=dom_targets,
        label_sets=label_sets,
    )


def make_batch(docs: Sequence, state: ModelState) -> TrainBatch:
    """Tokenize and tensorize documents against a model's vocabulary."""
    id_lists = [state.vocab.encode(tokenize(_document_text(d))) for d in docs]
    pt_index = {lab: i for i, lab in enumerate(state.pt_labels)}
    dom_index = {lab: i for i, lab in enumerate(state.domain_labels)}
    return _prepare_batch(docs, id_lists, state.vocab, pt_index, dom_index)


def train(train_docs: Sequence[AnnotatedDocument], val_docs: Sequence[AnnotatedDocument],
          strategy: TrainingStrategy, hyper: HyperParams, pt_labels: Sequence[str],
          domain_labels: Sequence[str] = (), lexicon=None
          ) -> tuple[ModelState, TrainingLog]:
    """Mini-batch training with adaptive moments and early stopping.

    Masking strategies preprocess the training split once (fixed selection);
    the vocabulary is then built from the training split. Validation
    macro-F1 drives checkpoint selection with the configured patience.
    Deterministic given the seed.
    """
    if not train_docs or not val_docs:
        raise ValueError("training and validation splits must be non-empty")
    if strategy.uses_adversarial and not domain_labels:
        raise ValueError("adversarial strategies require non-empty domain labels")
    if strategy.uses_masking:
        if lexicon is None:
            raise ValueError("masking strategies require a lexicon")
        masking = strategy.masking or MaskingSpec(instance_ratio=0.5, seed=hyper.seed)
        train_docs = build_masked_training_set(train_docs, lexicon, masking)

    torch.set_num_threads(1)  # keeps reduction order, and therefore bytes, fixed
    token_lists = [tokenize(d.text()) for d in train_docs]
    vocab = Vocabulary.build(token_lists, hyper.min_token_freq)
    state = ModelState(vocab, pt_labels, domain_labels, hyper, strategy.kind)
    pt_index = {lab: i for i, lab in enumerate(pt_labels)}
    dom_index = {lab: i for i, lab in enumerate(domain_labels)}

    id_lists = [vocab.encode(toks) for toks in token_lists]
    full = _prepare_batch(train_docs, id_lists, vocab, pt_index, dom_index)
    val_counts = _count_matrix([vocab.encode(tokenize(d.text())) for d in val_docs],
                               len(vocab))
    val_bag = _to_bag(val_counts)
    val_gold = [set(d.pt_labels) for d in val_docs]

    head_params = [state.W_task, state.b_task, state.W_dom, state.b_dom]
    groups = [{"params": [state.E], "lr": hyper.lr_encoder},
              {"params": head_params, "lr": hyper.lr_heads}]
    opt_cls = torch.optim.RAdam if hyper.optimizer == "radam" else torch.optim.Adam
    optimizer = opt_cls(groups)

    log = TrainingLog()
    best_f1 = -math.inf
    best_weights = state.clone_weights()
    epochs_without_improvement = 0
    n = len(train_docs)

    for epoch in range(1, hyper.max_epochs + 1):
        p = (epoch - 1) / hyper.max_epochs
        order = list(range(n))
        random.Random(stable_seed(hyper.seed, "shuffle", epoch)).shuffle(order)
        sums = {"asl": 0.0, "unsup": 0.0, "sup": 0.0, "domain": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, hyper.batch_size):
            rows = order[start:start + hyper.batch_size]
            batch = TrainBatch(
                doc_ids=[full.doc_ids[i] for i in rows],
                counts=full.counts[rows],
                bag=full.bag[rows],
                pt_targets=full.pt_targets[rows],
                domain_targets=full.domain_targets[rows],
                label_sets=[full.label_sets[i] for i in rows],
            )
            view_seed = stable_seed(hyper.seed, "view", epoch, steps)
            try:
                out = total_loss(state, batch, strategy, p, view_seed)
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDivergedError(epoch) from None
                raise
            optimizer.zero_grad(set_to_none=False)
            for name, param in state.parameters().items():
                param.grad = out.grads[name].clone()
            optimizer.step()
            for key in ("asl", "unsup", "sup", "domain"):
                sums[key] += out.components[key]
            sums["total"] += out.total
            steps += 1

        with torch.no_grad():
            val_probs = torch.sigmoid((val_bag @ state.E) @ state.W_task + state.b_task).numpy()
        val_records = [
            PredictionRecord(doc_id=str(i), probs=row,
                             predicted={lab for lab, pr in zip(pt_labels, row)
                                        if pr >= hyper.tau},
                             gold=val_gold[i])
            for i, row in enumerate(val_probs)
        ]
        val_set = PredictionSet(labels=list(pt_labels), tau=hyper.tau,
                                model_id=strategy.kind, records=val_records)
        _, _, val_macro_f1 = prf(val_set, "macro")
        entry = {"epoch": epoch, "p": p,
                 "lambda": lambda_schedule(p, hyper.lambda_max) if strategy.uses_adversarial else 0.0,
                 "val_macro_f1": val_macro_f1}
        entry.update({f"loss_{k}": v / max(steps, 1) for k, v in sums.items()})
        log.epochs.append(entry)

        if val_macro_f1 > best_f1:
            best_f1 = val_macro_f1
            best_weights = state.clone_weights()
            log.best_epoch = epoch
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
        log.stopped_epoch = epoch
        if epochs_without_improvement >= hyper.patience:
            break

    state.load_weights(best_weights)
    return state, log


# ---------------------------------------------------------------------------
# Prediction and attribution
# ---------------------------------------------------------------------------

def predict(state: ModelState, doc, tau: float | None = None) -> PredictionRecord:
    """Per-label sigmoid probabilities and the thresholded label set.

    A label is predicted when its probability is >= tau (ties included).
    """
    tau = state.hyper.tau if tau is None else tau
    ids = state.vocab.encode(tokenize(_document_text(doc)))
    with torch.no_grad():
        emb = encode(state, ids)
        probs = torch.sigmoid(emb @ state.W_task + state.b_task).numpy()
    predicted = {lab for lab, prob in zip(state.pt_labels, probs) if prob >= tau}
    return PredictionRecord(doc_id=_document_id(doc), probs=np.asarray(probs, dtype=float),
                            predicted=predicted, gold=_document_labels(doc))


def predict_batch(state: ModelState, docs: Sequence, tau: float | None = None
                  ) -> list[PredictionRecord]:
    tau = state.hyper.tau if tau is None else tau
    id_lists = [state.vocab.encode(tokenize(_document_text(d))) for d in docs]
    counts = _count_matrix(id_lists, len(state.vocab))
    with torch.no_grad():
        emb = _to_bag(counts) @ state.E
        probs = torch.sigmoid(emb @ state.W_task + state.b_task).numpy()
    out = []
    for doc, row in zip(docs, probs):
        predicted = {lab for lab, prob in zip(state.pt_labels, row) if prob >= tau}
        out.append(PredictionRecord(doc_id=_document_id(doc),
                                    probs=np.asarray(row, dtype=float),
                                    predicted=predicted, gold=_document_labels(doc)))
    return out


def saliency(state: ModelState, doc, label: str) -> list[tuple[str, float]]:
    """Gradient-times-input attribution per token, normalized to [0, 1].

    Scores are |d(logit_label)/d(embedding_i) . embedding_i| taken at each
    token position's embedding lookup, divided by the maximum over the
    document (all zeros stay zero).
    """
    if label not in state.pt_labels:
        raise ValueError(f"unknown label {label!r}")
    li = state.pt_labels.index(label)
    tokens = tokenize(_document_text(doc))
    if not tokens:
        return []
    ids = state.vocab.encode(tokens)
    x = state.E.detach()[ids].clone().requires_grad_(True)
    logit = x.mean(dim=0) @ state.W_task.detach()[:, li] + state.b_task.detach()[li]
    (grad,) = torch.autograd.grad(logit, x)
    scores = (grad * x.detach()).sum(dim=1).abs()
    top = float(scores.max())
    if top > 0:
        scores = scores / top
    return list(zip(tokens, [float(s) for s in scores]))


# ---------------------------------------------------------------------------
# Checkpoint I/O (versioned line-text format; round-trips exactly)
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_model(state: ModelState, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "strategy": state.strategy_kind,
        "hyper": asdict(state.hyper),
        "vocab": state.vocab.tokens,
        "pt_labels": state.pt_labels,
        "domain_labels": state.domain_labels,
        "weights": {name: getattr(state, name).detach().tolist()
                    for name in ModelState.PARAM_NAMES},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False)
        fh.write("\n")


def load_model(path: str | Path) -> ModelState:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    hyper = HyperParams(**payload["hyper"])
    vocab = Vocabulary(payload["vocab"])
    d = hyper.embed_dim
    shapes = {
        "E": (len(payload["vocab"]), d),
        "W_task": (d, len(payload["pt_labels"])),
        "b_task": (len(payload["pt_labels"]),),
        "W_dom": (d, len(payload["domain_labels"])),
        "b_dom": (len(payload["domain_labels"]),),
    }
    weights = {name: torch.tensor(payload["weights"][name],
                                  dtype=torch.float64).reshape(shapes[name])
               for name in ModelState.PARAM_NAMES}
    return ModelState(vocab, payload["pt_labels"], payload["domain_labels"],
                      hyper, payload["strategy"], weights=weights)
