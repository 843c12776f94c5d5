"""Command-line surface.

Commands: gradcheck, reduce-check, gen-data, pretrain, knn, probe,
analyze. Exit codes: 0 success, 1 check failure, 2 usage or config
error, 3 I/O error. Failures print one machine-parseable line to stderr:
``error: <category>: <reason>``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .augment import Dataset, generate_dataset, load_dataset, stratified_split, write_dataset
from .checks import gradcheck_suite, mle_equivalence_suite, reduction_suite
from .config import ConfigError, Experiment, load_config, resolve_config, experiment_from_dict
from .errors import ContractViolation, DomainError, EvaluationError
from .metrics import separability_report, write_separability_csv
from .nets import load_bundle
from .train import (EVAL_LOG_HEADER, build_eval_pairs, encode_features, knn_eval,
                    linear_probe, pretrain)
from .rng import derive

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _load_experiment(args) -> Experiment:
    if args.config is not None:
        experiment, _ = load_config(args.config)
        return experiment
    resolved = resolve_config({})
    experiment = experiment_from_dict(resolved)
    experiment.output_dir.mkdir(parents=True, exist_ok=True)
    return experiment


def _load_dataset(exp: Experiment) -> Dataset:
    if exp.dataset_path is not None:
        path = Path(exp.dataset_path)
        if not path.exists():
            raise FileNotFoundError(f"io.dataset: {path} does not exist")
        return load_dataset(path)
    return generate_dataset(exp.synthetic)


def _print_results(results) -> bool:
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.error:.3e} (tol {r.tol:.0e})")
        ok = ok and r.passed
    return ok


def cmd_gradcheck(args) -> int:
    exp = _load_experiment(args)
    results = gradcheck_suite(seed=derive(exp.train.run_seed, "gradcheck"))
    ok = _print_results(results)
    if not ok:
        print("error: gradcheck: at least one variant exceeded tolerance", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_reduce_check(args) -> int:
    exp = _load_experiment(args)
    results = reduction_suite(seed=derive(exp.train.run_seed, "reduce"))
    results += mle_equivalence_suite(seed=derive(exp.train.run_seed, "mle"))
    ok = _print_results(results)
    if not ok:
        print("error: reduce-check: equivalence exceeded tolerance", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_gen_data(args) -> int:
    exp = _load_experiment(args)
    if exp.dataset_path is None:
        raise ConfigError("io.dataset: gen-data needs a target directory")
    dataset = generate_dataset(exp.synthetic)
    write_dataset(dataset, exp.dataset_path)
    print(f"wrote {len(dataset)} images to {exp.dataset_path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    exp = _load_experiment(args)
    dataset = _load_dataset(exp)
    result = pretrain(dataset, exp.model, exp.loss, exp.train, exp.pipeline,
                      exp.eval, out_dir=exp.output_dir)
    print(f"pretrained {exp.train.epochs} epochs; "
          f"checkpoint and logs in {exp.output_dir}")
    if result.eval_rows:
        print(f"final eval ({EVAL_LOG_HEADER}): {result.eval_rows[-1]}")
    return EXIT_OK


def _load_run(exp: Experiment):
    checkpoint = exp.output_dir / "checkpoint.bin"
    if not checkpoint.exists():
        raise FileNotFoundError(f"io.output_dir: no checkpoint at {checkpoint}")
    bundle = load_bundle(checkpoint)
    dataset = _load_dataset(exp)
    train_idx, test_idx = stratified_split(dataset.labels, exp.train.test_fraction)
    return bundle, dataset, train_idx, test_idx


def _append_eval_rows(exp: Experiment, rows: list[str]) -> None:
    path = exp.output_dir / "eval_log.csv"
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        if fresh:
            fh.write(EVAL_LOG_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")


def cmd_knn(args) -> int:
    exp = _load_experiment(args)
    bundle, dataset, train_idx, test_idx = _load_run(exp)
    train_feats = encode_features(bundle, [dataset.images[i] for i in train_idx])
    test_feats = encode_features(bundle, [dataset.images[i] for i in test_idx])
    acc = knn_eval(train_feats, dataset.labels[train_idx], test_feats,
                   dataset.labels[test_idx], exp.eval.knn_k)
    _append_eval_rows(exp, [f"-1,{acc!r},,"])
    print(f"knn_acc={acc}")
    return EXIT_OK


def cmd_probe(args) -> int:
    exp = _load_experiment(args)
    bundle, dataset, train_idx, test_idx = _load_run(exp)
    train_feats = encode_features(bundle, [dataset.images[i] for i in train_idx])
    test_feats = encode_features(bundle, [dataset.images[i] for i in test_idx])
    rows = []
    for size in exp.eval.probe_sizes:
        acc = linear_probe(train_feats, dataset.labels[train_idx], test_feats,
                           dataset.labels[test_idx], size,
                           derive(exp.train.run_seed, "probe", size))
        rows.append(f"-1,,{acc!r},")
        print(f"probe_acc[{size} per class]={acc}")
    _append_eval_rows(exp, rows)
    return EXIT_OK


def cmd_analyze(args) -> int:
    exp = _load_experiment(args)
    bundle, dataset, train_idx, test_idx = _load_run(exp)
    test_images = [dataset.images[i] for i in test_idx]
    pos_pairs, neg_pairs = build_eval_pairs(test_images, exp.pipeline,
                                            exp.eval.pair_seed, exp.eval.pair_count)
    reports = [separability_report(bundle, pos_pairs, neg_pairs, source)
               for source in ("projected", "backbone")]
    out = exp.output_dir / "separability.csv"
    write_separability_csv(out, reports)
    for report in reports:
        print(f"overlap[{report.source}]={report.overlap}")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "reduce-check": cmd_reduce_check,
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "knn": cmd_knn,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contrastlab",
        description="Desk-scale laboratory for adaptive multi-head contrastive learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("-c", "--config", default=None,
                         help="experiment JSON (defaults apply when omitted)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractViolation, DomainError) as exc:
        print(f"error: contract: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"error: evaluation: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
