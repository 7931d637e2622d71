"""ptrobust command line: synth, perturb, mask, train, predict, saliency,
eval, report, run, sweep-mask, sweep-perturb."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import (apply_domain_labels, build_domain_labels, load_corpus,
                     save_corpus)
from .experiment import (RunConfig, StageError, config_from_manifest,
                         config_from_mapping, load_config, run_experiment,
                         sweep_masking, sweep_perturbation, verify_manifest_inputs)
from .lexicon import load_lexicon, save_lexicon
from .masking import MaskingSpec, build_masked_training_set
from .metrics import (PredictionSet, asr_micro, bootstrap_ci, compute_report,
                      degradation, load_predictions, prf, save_predictions)
from .model import (HyperParams, TrainingStrategy, load_model, predict_batch,
                    saliency, save_model, train)
from .perturb import PerturbationSpec, build_perturbed_testset, load_perturbed, save_perturbed
from .synthetic import SyntheticSpec, generate


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic corpus with planted shortcuts")
    p.add_argument("--rho", type=float, default=0.9, help="shortcut co-occurrence strength")
    p.add_argument("--mu", type=float, default=0.8, help="methodological cue rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=400)
    p.add_argument("--n-test", type=int, default=800)
    p.add_argument("--n-pt-labels", type=int, default=8)
    p.add_argument("--n-domain-labels", type=int, default=6)
    p.add_argument("--out-dir", required=True)


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                         n_pt_labels=args.n_pt_labels, n_domain_labels=args.n_domain_labels,
                         shortcut_strength=args.rho, method_cue_rate=args.mu, seed=args.seed)
    dataset = generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(dataset.train, out / "train.jsonl")
    save_corpus(dataset.val, out / "val.jsonl")
    save_corpus(dataset.test, out / "test.jsonl")
    save_lexicon(dataset.lexicon, out / "lexicon.tsv")
    with open(out / "phrases.tsv", "w", encoding="utf-8") as fh:
        for lab in dataset.pt_labels:
            fh.write(f"{lab}\t{dataset.phrases[lab]}\n")
    print(f"wrote {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} docs to {out}")
    return 0


def _add_perturb(sub):
    p = sub.add_parser("perturb", help="build a perturbed copy of a corpus")
    p.add_argument("--mode", choices=["synonym", "concept"], required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--eda", action="store_true")
    p.add_argument("--eda-ops", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)


def _cmd_perturb(args) -> int:
    docs = load_corpus(args.input)
    lexicon = load_lexicon(args.lexicon)
    spec = PerturbationSpec(mode=args.mode, ratio=args.ratio, eda=args.eda,
                            eda_ops_per_sentence=args.eda_ops, seed=args.seed)
    save_perturbed(build_perturbed_testset(docs, lexicon, spec), args.out)
    print(f"wrote {len(docs)} perturbed docs to {args.out}")
    return 0


def _add_mask(sub):
    p = sub.add_parser("mask", help="mask a seeded fraction of instances with typed markers")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)


def _cmd_mask(args) -> int:
    docs = load_corpus(args.input)
    lexicon = load_lexicon(args.lexicon)
    masked = build_masked_training_set(docs, lexicon, MaskingSpec(args.ratio, args.seed))
    save_corpus(masked, args.out)
    print(f"wrote {len(masked)} docs to {args.out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train one strategy")
    p.add_argument("--strategy", required=True,
                   choices=["baseline", "mask", "adversarial", "mask-adversarial"])
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--val", dest="val_path", required=True)
    p.add_argument("--lexicon", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--lr-encoder", type=float, default=0.05)
    p.add_argument("--lr-heads", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=4)
    p.add_argument("--lambda-max", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--excluded-branches", default="EHILNV")
    p.add_argument("--min-domain-fraction", type=float, default=0.01)
    p.add_argument("--log", default="", help="optional path for the epoch log (JSON)")


def _cmd_train(args) -> int:
    train_docs = load_corpus(args.train_path)
    val_docs = load_corpus(args.val_path)
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    hyper = HyperParams(embed_dim=args.embed_dim, lr_encoder=args.lr_encoder,
                        lr_heads=args.lr_heads, batch_size=args.batch_size,
                        max_epochs=args.max_epochs, patience=args.patience,
                        lambda_max=args.lambda_max, tau=args.tau, seed=args.seed)
    strategy = TrainingStrategy(
        args.strategy,
        MaskingSpec(args.mask_ratio, args.seed)
        if args.strategy in ("mask", "mask-adversarial") else None)
    pt_labels = sorted({lab for d in (*train_docs, *val_docs) for lab in d.pt_labels})
    domain_labels = []
    if strategy.uses_adversarial:
        domain_labels = build_domain_labels(train_docs, frozenset(args.excluded_branches),
                                            args.min_domain_fraction)
        apply_domain_labels(val_docs, domain_labels, frozenset(args.excluded_branches))
    state, log = train(train_docs, val_docs, strategy, hyper, pt_labels,
                       domain_labels, lexicon=lexicon)
    save_model(state, args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            json.dump({"best_epoch": log.best_epoch, "stopped_epoch": log.stopped_epoch,
                       "epochs": log.epochs}, fh, indent=1)
            fh.write("\n")
    best = log.epochs[log.best_epoch - 1]["val_macro_f1"] if log.epochs else float("nan")
    print(f"trained {args.strategy}: best epoch {log.best_epoch} "
          f"(val macro-F1 {best:.4f}), stopped after epoch {log.stopped_epoch}")
    return 0


def _add_predict(sub):
    p = sub.add_parser("predict", help="write per-label probabilities and predicted sets")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--perturbed", action="store_true",
                   help="input is a perturbed set (flat text records)")


def _load_docs_any(path: str, perturbed: bool):
    if perturbed:
        return load_perturbed(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.strip() and "\"text\"" in first and "\"fields\"" not in first:
        return load_perturbed(path)
    return load_corpus(path)


def _cmd_predict(args) -> int:
    state = load_model(args.model)
    docs = _load_docs_any(args.input, args.perturbed)
    tau = state.hyper.tau if args.tau is None else args.tau
    records = predict_batch(state, docs, tau)
    preds = PredictionSet(labels=list(state.pt_labels), tau=tau,
                          model_id=f"{state.strategy_kind}:{Path(args.model).name}",
                          records=records)
    save_predictions(preds, args.out)
    print(f"wrote {len(records)} prediction records to {args.out}")
    return 0


def _add_saliency(sub):
    p = sub.add_parser("saliency", help="token attribution for one document and label")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--doc-id", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--perturbed", action="store_true")


def _cmd_saliency(args) -> int:
    state = load_model(args.model)
    docs = _load_docs_any(args.input, args.perturbed)
    by_id = {getattr(d, "doc_id", None) or d.base: d for d in docs}
    if args.doc_id not in by_id:
        print(f"doc {args.doc_id!r} not found in {args.input}", file=sys.stderr)
        return 1
    for token, score in saliency(state, by_id[args.doc_id], args.label):
        print(f"{score:.4f}\t{token}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="metrics report for one predictions file")
    p.add_argument("--preds", required=True)
    p.add_argument("--clean", default="", help="clean predictions, enables ASR/degradation")
    p.add_argument("--core", default="", help="file with one core label per line")
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--csv", default="", help="also write the report as CSV")


def _read_core(path: str) -> tuple[str, ...]:
    if not path:
        return ()
    return tuple(line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()
                 if line.strip())


def _cmd_eval(args) -> int:
    preds = load_predictions(args.preds)
    core = _read_core(args.core) or None
    report = compute_report(preds, core, n_bins=args.bins)
    rows = [(k, f"{v:.6f}") for k, v in sorted(report.items())]
    if args.clean:
        clean = load_predictions(args.clean)
        clean_report = compute_report(clean, core, n_bins=args.bins)
        delta = degradation(clean_report, report)
        rows += [(f"delta_{k}", f"{v:+.6f}") for k, v in sorted(delta.items())]
        rows.append(("asr", f"{asr_micro(clean, preds):.4f}"))
    if args.bootstrap > 0:
        point, lo, hi = bootstrap_ci(preds, lambda ps: prf(ps, "micro")[2],
                                     args.bootstrap, args.level, args.seed)
        rows.append(("f1_micro_ci", f"{point:.6f} [{lo:.6f}, {hi:.6f}]"))
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            for key, value in rows:
                fh.write(f"{key},{value}\n")
    return 0


def _add_report(sub):
    p = sub.add_parser("report", help="ASR and signed degradation for a clean/perturbed pair")
    p.add_argument("--clean", required=True)
    p.add_argument("--perturbed", required=True)
    p.add_argument("--core", default="")


def _cmd_report(args) -> int:
    clean = load_predictions(args.clean)
    perturbed = load_predictions(args.perturbed)
    core = _read_core(args.core) or None
    clean_report = compute_report(clean, core)
    pert_report = compute_report(perturbed, core)
    delta = degradation(clean_report, pert_report)
    asr = asr_micro(clean, perturbed)
    print(f"{'model':<24} {'ASR(%)':>8} {'dF1':>8} {'dPrec':>8} {'dRecall':>8} {'dAUPRC':>8}")
    print(f"{clean.model_id:<24} {asr:>8.2f} {delta['f1_micro']:>8.3f} "
          f"{delta['precision_micro']:>8.3f} {delta['recall_micro']:>8.3f} "
          f"{delta['auprc_micro']:>8.3f}")
    return 0


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _add_run(sub):
    p = sub.add_parser("run", help="full experiment: data, training, evaluation, report")
    p.add_argument("--config", default="", help="flat key = value config file")
    p.add_argument("--from-manifest", default="", help="re-run a recorded experiment")
    p.add_argument("--out-dir", default="")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _build_run_config(args) -> RunConfig:
    overrides = _parse_overrides(args.set)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.from_manifest:
        bad = verify_manifest_inputs(args.from_manifest)
        if bad:
            raise StageError("manifest", ValueError(f"input hashes changed: {bad}"))
        config = config_from_manifest(args.from_manifest,
                                      out_dir=overrides.pop("out_dir", None))
        return config_from_mapping(overrides, base=config) if overrides else config
    if args.config:
        return load_config(args.config, overrides)
    return config_from_mapping(overrides)


def _cmd_run(args) -> int:
    config = _build_run_config(args)
    report = run_experiment(config)
    print((report.out_dir / "report.txt").read_text(encoding="utf-8"))
    print(f"outputs in {report.out_dir}")
    return 0


def _add_sweep_mask(sub):
    p = sub.add_parser("sweep-mask", help="mask-strategy runs across masking ratios")
    p.add_argument("--config", default="")
    p.add_argument("--out-dir", default="")
    p.add_argument("--ratios", default="0.3,0.5,1.0")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")


def _cmd_sweep_mask(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    config = load_config(args.config, overrides) if args.config \
        else config_from_mapping(overrides)
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    rows = sweep_masking(config, ratios)
    for row in rows:
        cells = " ".join(f"{k}={v:.4f}" if isinstance(v, float) and k != "ratio" else f"{k}={v}"
                         for k, v in row.items())
        print(cells)
    return 0


def _add_sweep_perturb(sub):
    p = sub.add_parser("sweep-perturb", help="degradation curve across severity points")
    p.add_argument("--config", default="")
    p.add_argument("--out-dir", default="")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")


def _cmd_sweep_perturb(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    config = load_config(args.config, overrides) if args.config \
        else config_from_mapping(overrides)
    rows = sweep_perturbation(config)
    for row in rows:
        print(f"{row['model']:<20} {row['mode']:<8} ratio={row['ratio']:<4} "
              f"eda={str(row['eda']):<5} dF1={row['delta_f1']:+.4f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "perturb": _cmd_perturb,
    "mask": _cmd_mask,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "saliency": _cmd_saliency,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "run": _cmd_run,
    "sweep-mask": _cmd_sweep_mask,
    "sweep-perturb": _cmd_sweep_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptrobust",
                                     description="perturbation-robustness harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_synth, _add_perturb, _add_mask, _add_train, _add_predict,
                _add_saliency, _add_eval, _add_report, _add_run, _add_sweep_mask,
                _add_sweep_perturb):
        add(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error in stage {exc.stage!r}: {exc.cause}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
