"""Task-performance and robustness metrics over prediction records.

Conventions pinned here (they matter for reproducibility):

* zero divisions: precision = 0 with no predictions, recall = 0 with no
  gold positives, F1 = 0 when P + R = 0;
* macro averages run over labels with at least one gold positive; labels
  without positives are excluded (and logged);
* AUPRC uses step (average-precision) interpolation over descending
  probability thresholds, not trapezoidal interpolation;
* multi-label calibration pools every (document, label) pair as an
  independent binary forecast, ten equal-width bins by default;
* bootstrap resampling indexes into the doc_id-sorted record list with one
  counter-based stream per resample, so results are independent of input
  order and of serial vs. parallel execution.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats as sp_stats

logger = logging.getLogger(__name__)


class MetricUndefinedError(ValueError):
    """The metric has no value on this input (e.g. ASR with no clean TPs)."""


@dataclass
class PredictionRecord:
    doc_id: str
    probs: np.ndarray
    predicted: set[str]
    gold: set[str]


@dataclass
class PredictionSet:
    """Aligned predictions for one model on one document set."""

    labels: list[str]
    tau: float
    model_id: str
    records: list[PredictionRecord]

    def sorted_records(self) -> list[PredictionRecord]:
        return sorted(self.records, key=lambda r: r.doc_id)

    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}


def label_universe_hash(labels: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(labels).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Precision / recall / F1
# ---------------------------------------------------------------------------

def _prf_from_counts(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _resolve_labels(preds: PredictionSet, averaging: str,
                    core_set: Iterable[str] | None) -> list[str]:
    if averaging == "core":
        if not core_set:
            raise ValueError("core averaging requires a non-empty core set")
        core = set(core_set)
        missing = core - set(preds.labels)
        if missing:
            raise ValueError(f"core labels not in the label universe: {sorted(missing)}")
        return [lab for lab in preds.labels if lab in core]
    return list(preds.labels)


def prf(preds: PredictionSet, averaging: str = "micro",
        core_set: Iterable[str] | None = None) -> tuple[float, float, float]:
    """Multi-label precision/recall/F1 under micro, macro, or core averaging."""
    if not preds.records:
        raise ValueError("no prediction records")
    labels = _resolve_labels(preds, averaging, core_set)
    if averaging == "micro":
        tp = fp = fn = 0
        for r in preds.records:
            tp += len(r.predicted & r.gold)
            fp += len(r.predicted - r.gold)
            fn += len(r.gold - r.predicted)
        return _prf_from_counts(tp, fp, fn)

    per_label = []
    excluded = []
    for lab in labels:
        tp = sum(1 for r in preds.records if lab in r.predicted and lab in r.gold)
        fp = sum(1 for r in preds.records if lab in r.predicted and lab not in r.gold)
        fn = sum(1 for r in preds.records if lab not in r.predicted and lab in r.gold)
        if tp + fn == 0:
            excluded.append(lab)
            continue
        per_label.append(_prf_from_counts(tp, fp, fn))
    if excluded:
        logger.debug("macro averaging excludes %d labels with no gold positives", len(excluded))
    if not per_label:
        return 0.0, 0.0, 0.0
    arr = np.asarray(per_label)
    return tuple(float(v) for v in arr.mean(axis=0))


# ---------------------------------------------------------------------------
# Area under the precision-recall curve
# ---------------------------------------------------------------------------

def _average_precision(scores: np.ndarray, outcomes: np.ndarray) -> float | None:
    """Step-interpolated AP; None when there are no positive outcomes.

    Operating points are the distinct scores in descending order; ties enter
    an operating point together.
    """
    n_pos = int(outcomes.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    outcomes = outcomes[order]
    ap = 0.0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    tp = 0
    taken = 0
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            j += 1
        tp += int(outcomes[i:j].sum())
        taken = j
        recall = tp / n_pos
        precision = tp / taken
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


def auprc(preds: PredictionSet, averaging: str = "micro",
          core_set: Iterable[str] | None = None) -> float:
    """Average precision over the requested label pooling."""
    if not preds.records:
        raise ValueError("no prediction records")
    idx = preds.label_index()
    labels = _resolve_labels(preds, averaging, core_set)
    if averaging == "micro":
        scores = np.concatenate([np.asarray(r.probs, dtype=float) for r in preds.records])
        outcomes = np.concatenate([
            np.array([lab in r.gold for lab in preds.labels], dtype=float)
            for r in preds.records
        ])
        ap = _average_precision(scores, outcomes)
        if ap is None:
            raise MetricUndefinedError("micro AUPRC undefined: no gold positives at all")
        return ap
    values = []
    for lab in labels:
        li = idx[lab]
        scores = np.array([float(r.probs[li]) for r in preds.records])
        outcomes = np.array([lab in r.gold for r in preds.records], dtype=float)
        ap = _average_precision(scores, outcomes)
        if ap is not None:
            values.append(ap)
    if not values:
        raise MetricUndefinedError("AUPRC undefined: no label has gold positives")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Expected calibration error
# ---------------------------------------------------------------------------

def ece(preds: PredictionSet, n_bins: int = 10, norm: str = "l1") -> float:
    """Binned calibration error of the pooled (document, label) forecasts.

    norm: "l1" (weighted mean gap), "l2" (sqrt of weighted mean squared
    gap), or "lmax" (largest gap over non-empty bins). Lower is better.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if norm not in ("l1", "l2", "lmax"):
        raise ValueError(f"unknown norm {norm!r}")
    probs = []
    outcomes = []
    for r in preds.records:
        probs.append(np.asarray(r.probs, dtype=float))
        outcomes.append(np.array([lab in r.gold for lab in preds.labels], dtype=float))
    p = np.concatenate(probs)
    y = np.concatenate(outcomes)
    bin_idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    total = len(p)
    gaps = []
    weights = []
    for b in range(n_bins):
        mask = bin_idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        gaps.append(abs(float(y[mask].mean()) - float(p[mask].mean())))
        weights.append(count / total)
    gaps_arr = np.asarray(gaps)
    w = np.asarray(weights)
    if norm == "l1":
        return float((w * gaps_arr).sum())
    if norm == "l2":
        return float(np.sqrt((w * gaps_arr ** 2).sum()))
    return float(gaps_arr.max())


# ---------------------------------------------------------------------------
# Robustness: attack success rate and degradation
# ---------------------------------------------------------------------------

def _align(clean: PredictionSet, perturbed: PredictionSet
           ) -> list[tuple[PredictionRecord, PredictionRecord]]:
    by_id = {r.doc_id: r for r in perturbed.records}
    if len(by_id) != len(perturbed.records):
        raise ValueError("duplicate doc_ids in perturbed predictions")
    clean_ids = {r.doc_id for r in clean.records}
    if clean_ids != set(by_id):
        raise ValueError("clean and perturbed predictions cover different documents")
    return [(r, by_id[r.doc_id]) for r in clean.sorted_records()]


def asr_micro(clean: PredictionSet, perturbed: PredictionSet) -> float:
    """Attack success rate, in percent: the share of clean true-positive
    label predictions that are no longer predicted after perturbation."""
    lost = 0
    denom = 0
    for rc, rp in _align(clean, perturbed):
        clean_tp = rc.gold & rc.predicted
        denom += len(clean_tp)
        lost += len(clean_tp - rp.predicted)
    if denom == 0:
        raise MetricUndefinedError("ASR undefined: no clean true positives")
    return 100.0 * lost / denom


def degradation(clean_report: dict[str, float], perturbed_report: dict[str, float]
                ) -> dict[str, float]:
    """Signed per-metric delta, perturbed minus clean (negative = worse)."""
    common = [k for k in clean_report if k in perturbed_report]
    return {k: perturbed_report[k] - clean_report[k] for k in common}


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

REPORT_METRICS = ("f1", "precision", "recall", "auprc")


def compute_report(preds: PredictionSet, core_set: Iterable[str] | None = None,
                   n_bins: int = 10) -> dict[str, float]:
    """All headline metrics for one prediction set, keyed e.g. "f1_micro"."""
    report: dict[str, float] = {}
    averagings = ["micro", "macro"] + (["core"] if core_set else [])
    for averaging in averagings:
        p, r, f1 = prf(preds, averaging, core_set)
        report[f"precision_{averaging}"] = p
        report[f"recall_{averaging}"] = r
        report[f"f1_{averaging}"] = f1
        report[f"auprc_{averaging}"] = auprc(preds, averaging, core_set)
    for norm in ("l1", "l2", "lmax"):
        report[f"ece_{norm}"] = ece(preds, n_bins=n_bins, norm=norm)
    return report


# ---------------------------------------------------------------------------
# Bootstrap confidence intervals and paired tests
# ---------------------------------------------------------------------------

def _resample_rng(seed: int, resample: int, attempt: int) -> np.random.Generator:
    from .seeding import stable_key128
    return np.random.Generator(np.random.Philox(key=stable_key128(seed, resample, attempt)))


def _bootstrap_values(n_docs: int, metric_of_indices: Callable[[np.ndarray], float],
                      n_resamples: int, seed: int) -> np.ndarray:
    values = np.empty(n_resamples)
    budget = 10 * n_resamples
    attempts_used = 0
    for r in range(n_resamples):
        attempt = 0
        while True:
            if attempts_used >= budget:
                raise MetricUndefinedError(
                    "bootstrap exceeded its redraw budget; metric undefined too often")
            rng = _resample_rng(seed, r, attempt)
            idx = rng.integers(0, n_docs, size=n_docs)
            attempts_used += 1
            try:
                values[r] = metric_of_indices(idx)
                break
            except MetricUndefinedError:
                attempt += 1
    return values


def bootstrap_ci(preds: PredictionSet, metric_fn: Callable[[PredictionSet], float],
                 n_resamples: int = 1000, level: float = 0.95, seed: int = 0
                 ) -> tuple[float, float, float]:
    """Percentile bootstrap interval for a metric of one prediction set.

    Documents are resampled with replacement by index into the doc_id-sorted
    record list; deterministic given the seed and invariant to input order.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    records = preds.sorted_records()
    base = replace(preds, records=records)
    point = metric_fn(base)

    def metric_of_indices(idx: np.ndarray) -> float:
        return metric_fn(replace(base, records=[records[i] for i in idx]))

    values = _bootstrap_values(len(records), metric_of_indices, n_resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return point, float(lo), float(hi)


def bootstrap_ci_paired(clean: PredictionSet, perturbed: PredictionSet,
                        metric_fn: Callable[[PredictionSet, PredictionSet], float],
                        n_resamples: int = 1000, level: float = 0.95, seed: int = 0
                        ) -> tuple[float, float, float]:
    """Bootstrap interval for a metric of aligned clean/perturbed sets (ASR)."""
    pairs = _align(clean, perturbed)
    clean_records = [c for c, _ in pairs]
    pert_records = [p for _, p in pairs]
    base_c = replace(clean, records=clean_records)
    base_p = replace(perturbed, records=pert_records)
    point = metric_fn(base_c, base_p)

    def metric_of_indices(idx: np.ndarray) -> float:
        return metric_fn(replace(base_c, records=[clean_records[i] for i in idx]),
                         replace(base_p, records=[pert_records[i] for i in idx]))

    values = _bootstrap_values(len(pairs), metric_of_indices, n_resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return point, float(lo), float(hi)


@dataclass(frozen=True)
class PairedBootstrapResult:
    p_value: float
    mean_difference: float
    n_resamples: int
    zero_variance: bool = False


def paired_bootstrap_test(preds_a: PredictionSet, preds_b: PredictionSet,
                          metric_fn: Callable[[PredictionSet], float],
                          n_resamples: int = 1000, seed: int = 0,
                          method: str = "t") -> PairedBootstrapResult:
    """One-sided comparison of two models over shared bootstrap resamples.

    Both models see the same resample index stream; per-resample differences
    d_r = m_A - m_B are tested against H0: mean <= 0. method="t" runs a
    t-test on {d_r}; method="fraction" instead reports the share of
    resamples with d_r <= 0.
    """
    a_records = preds_a.sorted_records()
    b_records = preds_b.sorted_records()
    if [r.doc_id for r in a_records] != [r.doc_id for r in b_records]:
        raise ValueError("prediction sets A and B cover different documents")
    base_a = replace(preds_a, records=a_records)
    base_b = replace(preds_b, records=b_records)

    def diff_of_indices(idx: np.ndarray) -> float:
        m_a = metric_fn(replace(base_a, records=[a_records[i] for i in idx]))
        m_b = metric_fn(replace(base_b, records=[b_records[i] for i in idx]))
        return m_a - m_b

    diffs = _bootstrap_values(len(a_records), diff_of_indices, n_resamples, seed)
    mean = float(diffs.mean())
    if method == "fraction":
        return PairedBootstrapResult(float((diffs <= 0).mean()), mean, n_resamples)
    if method != "t":
        raise ValueError(f"unknown method {method!r}")
    sd = float(diffs.std(ddof=1)) if n_resamples > 1 else 0.0
    if sd == 0.0:
        # degenerate difference distribution: report the trivial p for H0: mean <= 0
        return PairedBootstrapResult(1.0 if mean <= 0 else 0.0, mean, n_resamples,
                                     zero_variance=True)
    t = mean / (sd / math.sqrt(n_resamples))
    p = float(sp_stats.t.sf(t, df=n_resamples - 1))
    return PairedBootstrapResult(p, mean, n_resamples)


# ---------------------------------------------------------------------------
# Exact tests
# ---------------------------------------------------------------------------

def fisher_exact(table: Sequence[Sequence[int]]) -> float:
    """Two-sided Fisher exact p-value by full hypergeometric enumeration.

    Sums the probabilities of all tables (at the observed margins) whose
    probability does not exceed the observed table's; comparisons are done
    in exact integer arithmetic so ties need no tolerance.
    """
    (a, b), (c, d) = table
    if min(a, b, c, d) < 0 or any(int(x) != x for x in (a, b, c, d)):
        raise ValueError("table entries must be nonnegative integers")
    a, b, c, d = int(a), int(b), int(c), int(d)
    n = a + b + c + d
    if n == 0:
        raise ValueError("all-zero table")
    r1, c1 = a + b, a + c
    lo = max(0, c1 - (n - r1))
    hi = min(r1, c1)
    # unnormalized weights share the constant denominator C(n, c1)
    weight = {x: math.comb(r1, x) * math.comb(n - r1, c1 - x) for x in range(lo, hi + 1)}
    observed = weight[a]
    numer = sum(w for w in weight.values() if w <= observed)
    return numer / math.comb(n, c1)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of positive-difference ranks
    p_value: float
    n: int            # pairs remaining after dropping zero differences


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         exact_threshold: int = 20) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test with average ranks for ties.

    Zero differences are dropped first; at least 5 pairs must remain. The
    null distribution is enumerated exactly (conditional on the observed
    ranks) for n <= exact_threshold, and approximated by a tie-corrected
    normal with continuity correction above.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("degenerate pairing: all differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = sp_stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_threshold:
        # average ranks are multiples of 1/2; work in doubled integer units
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        total2 = int(ranks2.sum())
        counts = np.zeros(total2 + 1, dtype=np.int64)
        counts[0] = 1
        for r2 in ranks2:
            shifted = np.zeros_like(counts)
            shifted[r2:] = counts[:total2 + 1 - r2]
            counts = counts + shifted
        w2 = int(round(2 * w_plus))
        n_le = int(counts[: w2 + 1].sum())
        n_ge = int(counts[w2:].sum())
        p = min(1.0, 2.0 * min(n_le, n_ge) / 2.0 ** n)
        return WilcoxonResult(w_plus, p, n)

    mean = n * (n + 1) / 4.0
    tie_sizes = np.unique(np.abs(d), return_counts=True)[1]
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48.0
    if variance <= 0:
        raise ValueError("degenerate pairing: zero variance under ties")
    # continuity correction toward the mean
    z = (w_plus - mean - 0.5 * np.sign(w_plus - mean)) / math.sqrt(variance)
    p = min(1.0, 2.0 * float(sp_stats.norm.sf(abs(z))))
    return WilcoxonResult(w_plus, p, n)


@dataclass(frozen=True)
class AttributionComparison:
    statistic: float
    p_value: float
    n: int
    mean_difference: float  # mean(B) - mean(A) over eligible documents
    higher: str             # "A" or "B"


def attribution_comparison(means_a: Sequence[float | None],
                           means_b: Sequence[float | None]) -> AttributionComparison:
    """Paired Wilcoxon test on per-document mean attributions of two models.

    Inputs are aligned per document; None marks documents without any
    occurrence of the term class, which are excluded from the pairing.
    """
    if len(means_a) != len(means_b):
        raise ValueError("attribution lists must be aligned")
    pairs = [(a, b) for a, b in zip(means_a, means_b) if a is not None and b is not None]
    if len(pairs) < 5:
        raise ValueError(f"need at least 5 eligible documents, got {len(pairs)}")
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    res = wilcoxon_signed_rank(a, b)
    mean_diff = float((b - a).mean())
    return AttributionComparison(res.statistic, res.p_value, res.n, mean_diff,
                                 higher="B" if mean_diff > 0 else "A")


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def save_predictions(preds: PredictionSet, path: str | Path) -> None:
    """Header line with tau / universe hash / model id, then one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "tau": preds.tau,
            "labels": list(preds.labels),
            "label_universe_hash": label_universe_hash(preds.labels),
            "model_id": preds.model_id,
        }
        fh.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")) + "\n")
        for r in preds.records:
            rec = {
                "doc_id": r.doc_id,
                "probs": [float(p) for p in r.probs],
                "predicted": sorted(r.predicted),
                "gold": sorted(r.gold),
            }
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_predictions(path: str | Path) -> PredictionSet:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    for key in ("tau", "labels", "label_universe_hash", "model_id"):
        if key not in header:
            raise ValueError(f"{path}: header missing {key!r}")
    if header["label_universe_hash"] != label_universe_hash(header["labels"]):
        raise ValueError(f"{path}: label universe hash mismatch")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        records.append(PredictionRecord(
            doc_id=rec["doc_id"],
            probs=np.asarray(rec["probs"], dtype=float),
            predicted=set(rec["predicted"]),
            gold=set(rec["gold"]),
        ))
        if len(records[-1].probs) != len(header["labels"]):
            raise ValueError(f"{path}:{lineno}: probability vector length mismatch")
    return PredictionSet(labels=list(header["labels"]), tau=float(header["tau"]),
                         model_id=str(header["model_id"]), records=records)
