"""End-to-end experiment orchestration with reproducible manifests.

A run trains the requested strategies on shared splits and a shared seed,
evaluates each on the clean and perturbed test sets, and writes a combined
report (aligned text plus CSV), per-strategy prediction files, model
checkpoints, and a manifest capturing every resolved setting and the hash of
every input and output file. Re-running from the manifest reproduces all
output files byte-identically.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Sequence

from .corpus import apply_domain_labels, build_domain_labels, load_corpus, save_corpus
from .lexicon import load_lexicon, save_lexicon
from .masking import MaskingSpec
from .metrics import (PredictionSet, asr_micro, bootstrap_ci, bootstrap_ci_paired,
                      compute_report, degradation, prf, save_predictions)
from .model import (HyperParams, TrainingStrategy, load_model, predict_batch,
                    save_model, train)
from .perturb import PerturbationSpec, build_perturbed_testset, save_perturbed
from .synthetic import SyntheticSpec, generate

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it for the CLI exit message."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    strategies: tuple[str, ...] = ("baseline", "mask", "adversarial", "mask-adversarial")
    # data: explicit paths, or synthesized when synth is true
    synth: bool = True
    train_path: str = ""
    val_path: str = ""
    test_path: str = ""
    lexicon_path: str = ""
    # synthetic corpus knobs
    rho: float = 0.9
    mu: float = 0.8
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 800
    n_pt_labels: int = 8
    n_domain_labels: int = 6
    # primary perturbed test set
    perturb_mode: str = "concept"
    perturb_ratio: float = 1.0
    perturb_eda: bool = True
    eda_ops: int = 1
    # training
    mask_ratio: float = 0.5
    embed_dim: int = 64
    lr_encoder: float = 0.05
    lr_heads: float = 0.1
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 4
    lambda_max: float = 0.5
    alpha_unsup: float = 0.1
    beta_sup: float = 0.1
    tau: float = 0.5
    optimizer: str = "radam"
    # evaluation
    ece_bins: int = 10
    bootstrap_n: int = 0
    bootstrap_level: float = 0.95
    core_labels: tuple[str, ...] = ()
    excluded_branches: str = "EHILNV"
    min_domain_fraction: float = 0.01

    def hyper(self) -> HyperParams:
        return HyperParams(
            embed_dim=self.embed_dim, lr_encoder=self.lr_encoder, lr_heads=self.lr_heads,
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            lambda_max=self.lambda_max, alpha_unsup=self.alpha_unsup, beta_sup=self.beta_sup,
            tau=self.tau, optimizer=self.optimizer, seed=self.seed,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            n_pt_labels=self.n_pt_labels, n_domain_labels=self.n_domain_labels,
            shortcut_strength=self.rho, method_cue_rate=self.mu, seed=self.seed,
        )

    def perturbation_spec(self) -> PerturbationSpec:
        return PerturbationSpec(mode=self.perturb_mode, ratio=self.perturb_ratio,
                                eda=self.perturb_eda, eda_ops_per_sentence=self.eda_ops,
                                seed=self.seed)


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # tuple[str, ...]: comma-separated
    items = tuple(s.strip() for s in raw.split(",") if s.strip())
    return items


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name for f in dc_fields(RunConfig)}
    values = dataclasses.asdict(base)
    for key, raw in mapping.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(raw, str):
            current = getattr(base, key)
            kind = tuple if isinstance(current, tuple) else type(current)
            values[key] = _coerce(key, kind, raw)
        else:
            values[key] = raw
    values["strategies"] = tuple(values["strategies"])
    values["core_labels"] = tuple(values["core_labels"])
    return RunConfig(**values)


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    mapping = parse_config_text(Path(path).read_text(encoding="utf-8"))
    if overrides:
        mapping.update(overrides)
    return config_from_mapping(mapping)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Experiment pipeline
# ---------------------------------------------------------------------------

@dataclass
class StrategyResult:
    strategy: str
    clean: dict[str, float]
    perturbed: dict[str, float]
    delta: dict[str, float]
    asr: float
    intervals: dict[str, tuple[float, float, float]] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    config: RunConfig
    pt_labels: list[str]
    domain_labels: list[str]
    results: list[StrategyResult]
    out_dir: Path


def _stage(name: str):
    def decorator(fn):
        def wrapped(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return wrapped
    return decorator


@_stage("data")
def _load_data(config: RunConfig, out_data: Path):
    if config.synth:
        dataset = generate(config.synthetic_spec())
        save_corpus(dataset.train, out_data / "train.jsonl")
        save_corpus(dataset.val, out_data / "val.jsonl")
        save_corpus(dataset.test, out_data / "test.jsonl")
        save_lexicon(dataset.lexicon, out_data / "lexicon.tsv")
        with open(out_data / "phrases.tsv", "w", encoding="utf-8") as fh:
            for lab in dataset.pt_labels:
                fh.write(f"{lab}\t{dataset.phrases[lab]}\n")
        return (dataset.train, dataset.val, dataset.test, dataset.lexicon,
                list(dataset.pt_labels), [])
    for name, path in (("train", config.train_path), ("val", config.val_path),
                       ("test", config.test_path)):
        if not path:
            raise ValueError(f"{name} path missing and synth is off")
    train_docs = load_corpus(config.train_path)
    val_docs = load_corpus(config.val_path)
    test_docs = load_corpus(config.test_path)
    # the lexicon is first needed by the perturb stage; let that stage report it
    lexicon = load_lexicon(config.lexicon_path) if config.lexicon_path else None
    labels = sorted({lab for doc in (*train_docs, *val_docs, *test_docs)
                     for lab in doc.pt_labels})
    inputs = [p for p in (config.train_path, config.val_path, config.test_path,
                          config.lexicon_path) if p]
    return train_docs, val_docs, test_docs, lexicon, labels, inputs


@_stage("domain-labels")
def _domain_labels(config: RunConfig, train_docs, val_docs, test_docs) -> list[str]:
    excluded = frozenset(config.excluded_branches)
    retained = build_domain_labels(train_docs, excluded, config.min_domain_fraction)
    apply_domain_labels(val_docs, retained, excluded)
    apply_domain_labels(test_docs, retained, excluded)
    return retained


@_stage("perturb")
def _perturb(config: RunConfig, test_docs, lexicon, out_data: Path):
    if lexicon is None:
        raise ValueError("no lexicon available (set lexicon_path)")
    perturbed = build_perturbed_testset(test_docs, lexicon, config.perturbation_spec())
    save_perturbed(perturbed, out_data / "test_perturbed.jsonl")
    return perturbed


def _train_strategy(config: RunConfig, kind: str, train_docs, val_docs,
                    pt_labels, domain_labels, lexicon, models_dir: Path):
    strategy = TrainingStrategy(
        kind, MaskingSpec(config.mask_ratio, config.seed) if kind in ("mask", "mask-adversarial")
        else None)
    try:
        state, log = train(train_docs, val_docs, strategy, config.hyper(), pt_labels,
                           domain_labels if strategy.uses_adversarial else (),
                           lexicon=lexicon)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"train:{kind}", exc) from exc
    save_model(state, models_dir / f"{kind}.ckpt")
    with open(models_dir / f"{kind}.log.json", "w", encoding="utf-8") as fh:
        json.dump({"best_epoch": log.best_epoch, "stopped_epoch": log.stopped_epoch,
                   "epochs": log.epochs}, fh, ensure_ascii=False, indent=1)
        fh.write("\n")
    return state


def _evaluate_strategy(config: RunConfig, kind: str, state, test_docs, perturbed_docs,
                       pt_labels, preds_dir: Path) -> StrategyResult:
    try:
        model_id = f"{kind}/seed{config.seed}"
        clean_set = PredictionSet(list(pt_labels), config.tau, model_id,
                                  predict_batch(state, test_docs))
        pert_set = PredictionSet(list(pt_labels), config.tau, model_id,
                                 predict_batch(state, perturbed_docs))
        save_predictions(clean_set, preds_dir / f"{kind}_clean.jsonl")
        save_predictions(pert_set, preds_dir / f"{kind}_perturbed.jsonl")
    except Exception as exc:
        raise StageError(f"predict:{kind}", exc) from exc
    try:
        core = config.core_labels or None
        clean_report = compute_report(clean_set, core, config.ece_bins)
        pert_report = compute_report(pert_set, core, config.ece_bins)
        result = StrategyResult(
            strategy=kind,
            clean=clean_report,
            perturbed=pert_report,
            delta=degradation(clean_report, pert_report),
            asr=asr_micro(clean_set, pert_set),
        )
        if config.bootstrap_n > 0:
            def micro_f1(ps: PredictionSet) -> float:
                return prf(ps, "micro")[2]

            result.intervals["f1_micro_clean"] = bootstrap_ci(
                clean_set, micro_f1, config.bootstrap_n, config.bootstrap_level, config.seed)
            result.intervals["f1_micro_perturbed"] = bootstrap_ci(
                pert_set, micro_f1, config.bootstrap_n, config.bootstrap_level, config.seed)
            result.intervals["asr"] = bootstrap_ci_paired(
                clean_set, pert_set, asr_micro, config.bootstrap_n,
                config.bootstrap_level, config.seed)
        return result
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"eval:{kind}", exc) from exc


def run_experiment(config: RunConfig) -> ExperimentReport:
    """Train, evaluate, and report every requested strategy; write a manifest."""
    out_dir = Path(config.out_dir)
    out_data = out_dir / "data"
    models_dir = out_dir / "models"
    preds_dir = out_dir / "predictions"
    for d in (out_dir, out_data, models_dir, preds_dir):
        d.mkdir(parents=True, exist_ok=True)

    train_docs, val_docs, test_docs, lexicon, pt_labels, external_inputs = \
        _load_data(config, out_data)
    domain_labels = _domain_labels(config, train_docs, val_docs, test_docs)
    perturbed_docs = _perturb(config, test_docs, lexicon, out_data)

    results = []
    for kind in config.strategies:
        logger.info("training strategy %s", kind)
        state = _train_strategy(config, kind, train_docs, val_docs, pt_labels,
                                domain_labels, lexicon, models_dir)
        results.append(_evaluate_strategy(config, kind, state, test_docs, perturbed_docs,
                                          pt_labels, preds_dir))

    report = ExperimentReport(config, list(pt_labels), list(domain_labels), results, out_dir)
    try:
        _write_reports(report)
        _write_manifest(config, out_dir, external_inputs)
    except Exception as exc:
        raise StageError("report", exc) from exc
    return report


_REPORT_KEYS = ("f1_micro", "f1_macro", "precision_micro", "precision_macro",
                "recall_micro", "recall_macro", "auprc_micro", "auprc_macro",
                "ece_l1", "ece_l2", "ece_lmax")
_CORE_KEYS = ("f1_core", "precision_core", "recall_core", "auprc_core")


def _report_keys(config: RunConfig) -> tuple[str, ...]:
    keys = list(_REPORT_KEYS)
    if config.core_labels:
        keys += list(_CORE_KEYS)
    return tuple(keys)


def _write_reports(report: ExperimentReport) -> None:
    keys = _report_keys(report.config)
    csv_path = report.out_dir / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "split", "asr", *keys])
        for res in report.results:
            writer.writerow([res.strategy, "clean", "", *(f"{res.clean[k]:.6f}" for k in keys)])
            writer.writerow([res.strategy, "perturbed", f"{res.asr:.4f}",
                             *(f"{res.perturbed[k]:.6f}" for k in keys)])
            writer.writerow([res.strategy, "delta", "", *(f"{res.delta[k]:+.6f}" for k in keys)])
    with open(report.out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(format_report_text(report))


def format_report_text(report: ExperimentReport) -> str:
    """Aligned text table: robust accuracy, degradation, and ASR per strategy."""
    keys = ("f1_micro", "f1_macro", "precision_micro", "recall_micro",
            "auprc_micro", "ece_l1", "ece_l2", "ece_lmax")
    buf = io.StringIO()
    width = max(len(r.strategy) for r in report.results) + 2
    header = f"{'strategy':<{width}} {'split':<10} " + " ".join(f"{k:>15}" for k in keys)
    buf.write(header + "\n")
    buf.write("-" * len(header) + "\n")
    for res in report.results:
        for split, values in (("clean", res.clean), ("perturbed", res.perturbed),
                              ("delta", res.delta)):
            cells = " ".join(f"{values[k]:>15.4f}" for k in keys)
            buf.write(f"{res.strategy:<{width}} {split:<10} {cells}\n")
    buf.write("\n")
    buf.write(f"{'strategy':<{width}} {'ASR(%)':>8} {'dF1':>8} {'dPrec':>8} "
              f"{'dRecall':>8} {'dAUPRC':>8}\n")
    for res in report.results:
        buf.write(f"{res.strategy:<{width}} {res.asr:>8.2f} {res.delta['f1_micro']:>8.3f} "
                  f"{res.delta['precision_micro']:>8.3f} {res.delta['recall_micro']:>8.3f} "
                  f"{res.delta['auprc_micro']:>8.3f}\n")
    for res in report.results:
        for name, (point, lo, hi) in res.intervals.items():
            buf.write(f"{res.strategy} {name}: {point:.4f} [{lo:.4f}, {hi:.4f}]\n")
    return buf.getvalue()


def _write_manifest(config: RunConfig, out_dir: Path, external_inputs: Sequence[str]) -> None:
    lines = []
    for f in dc_fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        lines.append(f"config.{f.name}\t{value}")
    for path in external_inputs:
        lines.append(f"input.{path}\t{_sha256(Path(path))}")
    manifest_path = out_dir / "manifest.txt"
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path != manifest_path:
            lines.append(f"output.{path.relative_to(out_dir).as_posix()}\t{_sha256(path)}")
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_from_manifest(path: str | Path, out_dir: str | None = None) -> RunConfig:
    """Reconstruct the RunConfig recorded in a manifest file."""
    mapping = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        key, _, value = raw.partition("\t")
        if key.startswith("config."):
            mapping[key[len("config."):]] = value
    if out_dir is not None:
        mapping["out_dir"] = out_dir
    return config_from_mapping(mapping)


def verify_manifest_inputs(path: str | Path) -> list[str]:
    """Check recorded input hashes; returns the list of mismatched paths."""
    bad = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = raw.partition("\t")
        if key.startswith("input."):
            input_path = Path(key[len("input."):])
            if not input_path.exists() or _sha256(input_path) != value:
                bad.append(str(input_path))
    return bad


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sweep_masking(config: RunConfig, ratios: Sequence[float] = (0.3, 0.5, 1.0)
                  ) -> list[dict]:
    """One mask-strategy run per ratio on shared splits and seed.

    The shared seed makes the selected instance sets nested across ratios, so
    ratio effects are not confounded by selection noise.
    """
    if not ratios:
        raise ValueError("ratios must be non-empty")
    out_dir = Path(config.out_dir)
    out_data = out_dir / "data"
    models_dir = out_dir / "models"
    preds_dir = out_dir / "predictions"
    for d in (out_dir, out_data, models_dir, preds_dir):
        d.mkdir(parents=True, exist_ok=True)
    train_docs, val_docs, test_docs, lexicon, pt_labels, _ = _load_data(config, out_data)
    domain_labels = _domain_labels(config, train_docs, val_docs, test_docs)
    perturbed_docs = _perturb(config, test_docs, lexicon, out_data)

    rows = []
    for ratio in ratios:
        cfg = dataclasses.replace(config, mask_ratio=ratio)
        kind = "mask"
        state = _train_strategy(cfg, kind, train_docs, val_docs, pt_labels,
                                domain_labels, lexicon, models_dir)
        shutil.move(models_dir / f"{kind}.ckpt", models_dir / f"mask_{ratio:g}.ckpt")
        shutil.move(models_dir / f"{kind}.log.json", models_dir / f"mask_{ratio:g}.log.json")
        model_id = f"mask@{ratio:g}/seed{config.seed}"
        clean_set = PredictionSet(list(pt_labels), config.tau, model_id,
                                  predict_batch(state, test_docs))
        pert_set = PredictionSet(list(pt_labels), config.tau, model_id,
                                 predict_batch(state, perturbed_docs))
        core = config.core_labels or None
        row = {"ratio": ratio}
        for split, preds in (("clean", clean_set), ("perturbed", pert_set)):
            for averaging in ("micro", "macro", *(("core",) if core else ())):
                p, r, f1 = prf(preds, averaging, core)
                row[f"{split}_f1_{averaging}"] = f1
                row[f"{split}_precision_{averaging}"] = p
                row[f"{split}_recall_{averaging}"] = r
        rows.append(row)

    with open(out_dir / "masking_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k != "ratio" else v)
                             for k, v in row.items()})
    return rows


SEVERITY_POINTS = (
    ("synonym", 0.3, False), ("synonym", 0.5, False), ("synonym", 1.0, False),
    ("concept", 0.3, False), ("concept", 0.5, False), ("concept", 1.0, False),
    ("concept", 1.0, True),
)


def sweep_perturbation(config: RunConfig, model_paths: dict[str, str] | None = None
                       ) -> list[dict]:
    """Micro-F1 degradation of each trained model across severity points.

    Evaluates {synonym, concept} x {0.3, 0.5, 1.0} plus concept-1.0+EDA and
    emits one CSV row per (model, severity point).
    """
    out_dir = Path(config.out_dir)
    models_dir = out_dir / "models"
    if model_paths is None:
        model_paths = {kind: str(models_dir / f"{kind}.ckpt") for kind in config.strategies}
    for kind, path in model_paths.items():
        if not Path(path).exists():
            raise StageError("sweep-perturb",
                             FileNotFoundError(f"no trained model for {kind!r} at {path}"))
    out_data = out_dir / "data"
    out_data.mkdir(parents=True, exist_ok=True)
    train_docs, val_docs, test_docs, lexicon, pt_labels, _ = _load_data(config, out_data)

    rows = []
    for kind in sorted(model_paths):
        state = load_model(model_paths[kind])
        clean_set = PredictionSet(list(state.pt_labels), config.tau, kind,
                                  predict_batch(state, test_docs))
        _, _, clean_f1 = prf(clean_set, "micro")
        for mode, ratio, eda in SEVERITY_POINTS:
            spec = PerturbationSpec(mode=mode, ratio=ratio, eda=eda,
                                    eda_ops_per_sentence=config.eda_ops, seed=config.seed)
            perturbed = build_perturbed_testset(test_docs, lexicon, spec)
            pert_set = PredictionSet(list(state.pt_labels), config.tau, kind,
                                     predict_batch(state, perturbed))
            _, _, f1 = prf(pert_set, "micro")
            rows.append({"model": kind, "mode": mode, "ratio": ratio, "eda": eda,
                         "f1_micro": f1, "delta_f1": f1 - clean_f1})

    with open(out_dir / "perturbation_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "mode", "ratio", "eda",
                                                "f1_micro", "delta_f1"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "f1_micro": f"{row['f1_micro']:.6f}",
                             "delta_f1": f"{row['delta_f1']:+.6f}"})
    return rows
