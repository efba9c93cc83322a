"""Command line entry point: ``palm-lab <subcommand>``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure (including a
failed jacobian-verify run).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .core_math import NonFiniteError
from .data_metrics import (HallucinationConfig, ParallelCorpus, ToyTaskSpec, format_corpus, generate_dataset,
                           length_stats, metrics_report)
from .jacobian import Mode, sensitivity_curve, verify_closed_forms

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SENSITIVITY_WIDTH = 16


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: dict
    optimizer: dict = field(default_factory=dict)
    seed: int = 0
    task: dict | None = None
    output_dir: str | None = None
    holdout: int | None = None
    hallucination: dict = field(default_factory=dict)
    max_decode_len: int = 100

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        from .models import ModelConfig, OptimizerSettings

        data = json.loads(text)
        if not isinstance(data, dict):
            raise UsageError("experiment config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "model" not in data:
            raise UsageError("config needs a 'model' section")
        exp = cls(**data)
        # validate every section before any work starts
        ModelConfig.from_dict(exp.model)
        OptimizerSettings(**exp.optimizer)
        HallucinationConfig(**exp.hallucination)
        if exp.task is not None:
            ToyTaskSpec.from_dict(exp.task)
        if exp.holdout is not None and exp.holdout < 1:
            raise UsageError("holdout must be >= 1")
        if exp.max_decode_len < 0:
            raise UsageError("max_decode_len must be >= 0")
        return exp

    def model_config(self):
        from .models import ModelConfig
        return ModelConfig.from_dict(self.model)

    def optimizer_settings(self):
        from .models import OptimizerSettings
        return OptimizerSettings(**self.optimizer)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _load_corpus(path: str, vocab_size: int | None = None) -> ParallelCorpus:
    from .data_metrics import parse_corpus
    return parse_corpus(_read_text(path), vocab_size)


def _loss_csv(log: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "total", "decoder_nll", "source_nll"])
    for row in log:
        writer.writerow([row["epoch"]] + [f"{row[k]:.17g}" for k in ("total", "decoder_nll", "source_nll")])
    return buf.getvalue()


def loss_log_path(checkpoint: str | Path) -> Path:
    return Path(checkpoint).with_suffix(".loss.csv")


def _parse_seeds(text: str) -> list[int]:
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        count = int(text)
    except ValueError:
        raise UsageError(f"--seeds must be a count or a comma list, got {text!r}") from None
    if count < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(count))


def cmd_gen_data(args) -> int:
    spec = ToyTaskSpec.from_dict(json.loads(_read_text(args.spec)))
    corpus = generate_dataset(spec)
    Path(args.out).write_text(format_corpus(corpus), encoding="utf-8")
    print(f"wrote {len(corpus)} pairs to {args.out}")
    return EXIT_OK


def _train_one(exp: ExperimentConfig, pairs):
    from .models import train
    return train(exp.model_config(), pairs, exp.optimizer_settings(), exp.seed)


def cmd_train(args) -> int:
    from .models import save_checkpoint

    exp = ExperimentConfig.from_json(_read_text(args.config))
    cfg = exp.model_config()
    corpus = _load_corpus(args.data, cfg.vocab.size)
    if not len(corpus):
        raise UsageError("training corpus is empty")
    result = _train_one(exp, corpus.pairs)
    save_checkpoint(args.out, result.params, cfg)
    log_path = loss_log_path(args.out)
    log_path.write_text(_loss_csv(result.log), encoding="utf-8")
    final = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {cfg.variant.value} for {len(result.log)} epochs, final loss {final:.6f}")
    print(f"checkpoint: {args.out}\nloss log: {log_path}")
    return EXIT_OK


def _evaluate(params, cfg, corpus: ParallelCorpus, hcfg: HallucinationConfig, max_len: int, name: str):
    from .models import greedy_decode_batch

    generated = greedy_decode_batch(params, cfg, corpus.sources, max_len)
    report = metrics_report(name, corpus.sources, generated, corpus.references, hcfg)
    return report, generated


def cmd_eval(args) -> int:
    from .models import CheckpointError, load_checkpoint

    try:
        params, cfg = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read {args.checkpoint}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise UsageError(f"bad checkpoint: {exc}") from None
    corpus = _load_corpus(args.data, cfg.vocab.size)
    if not len(corpus):
        raise UsageError("evaluation corpus is empty")
    report, _ = _evaluate(params, cfg, corpus, HallucinationConfig(), 100, cfg.variant.value)
    Path(args.metrics).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"{report['model']}: bleu {report['bleu']:.4f}, exact match {report['seq_accuracy']:.4f}, "
          f"mean length {report['avg_len']:.3f}")
    return EXIT_OK


def cmd_jacobian_verify(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        dims = [int(x) for x in args.dims.split(",")]
    except ValueError:
        raise UsageError("--dims must be 'max_d,max_N,max_i'") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError("--dims must be three positive integers 'max_d,max_N,max_i'")
    result = verify_closed_forms(args.trials, *dims)
    status = "PASS" if result.passed else "FAIL"
    inst = ", ".join(f"{k}={v}" for k, v in result.worst_instance.items())
    print(f"closed form vs central differences over {result.trials} instances (d<={dims[0]}, "
          f"N<={dims[1]}, i<={dims[2]})")
    print(f"max relative Frobenius error: {result.max_error:.3e} (tolerance 1e-06)")
    print(f"worst instance: seed={result.worst_seed}, {inst}")
    print(status)
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_sensitivity(args) -> int:
    if args.N < 1 or args.imax < 1:
        raise UsageError("--N and --imax must be >= 1")
    mode = Mode.parse(args.mode)
    report = sensitivity_curve(SENSITIVITY_WIDTH, args.N, args.imax, mode, _parse_seeds(args.seeds))
    if not all(map(_finite, report.mean_sensitivity + report.perturbation_ratio)):
        raise NonFiniteError("non-finite sensitivity")
    Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    series = "perturbation_ratio" if mode is Mode.PARTIAL else "mean_sensitivity"
    print(f"{mode.value}: {args.imax} steps, Spearman rho(step, {series}) = {report.spearman(series):.4f}")
    return EXIT_OK


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def _compare_worker(job):
    import torch

    from .models import parameter_count

    torch.set_num_threads(1)
    name, exp_text, pairs, holdout_pairs, vocab_size = job
    exp = ExperimentConfig.from_json(exp_text)
    cfg = exp.model_config()
    result = _train_one(exp, pairs)
    held = ParallelCorpus(holdout_pairs, vocab_size)
    report, generated = _evaluate(result.params, cfg, held, HallucinationConfig(**exp.hallucination),
                                  exp.max_decode_len, cfg.variant.value)
    return {
        "config": name,
        "variant": cfg.variant.value,
        "seed": exp.seed,
        "parameters": parameter_count(result.params),
        "final_loss": result.log[-1] if result.log else None,
        "metrics": report,
    }, generated


def _thread_cap(jobs: int) -> int:
    raw = os.environ.get("PALM_LAB_THREADS")
    if raw is None:
        return max(jobs, 1)
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError("PALM_LAB_THREADS must be an integer") from None
    if cap < 1:
        raise UsageError("PALM_LAB_THREADS must be >= 1")
    return min(cap, max(jobs, 1))


def cmd_compare(args) -> int:
    cfg_dir = Path(args.configs)
    if not cfg_dir.is_dir():
        raise UsageError(f"{args.configs} is not a directory")
    files = sorted(cfg_dir.glob("*.json"))
    if not files:
        raise UsageError(f"no *.json configs in {args.configs}")
    exps = {f.stem: (_read_text(str(f)), ExperimentConfig.from_json(_read_text(str(f)))) for f in files}
    vocab = max(exp.model_config().vocab.size for _, exp in exps.values())
    corpus = _load_corpus(args.data, vocab)
    if len(corpus) < 2:
        raise UsageError("compare needs at least two pairs (train + held out)")
    holdouts = {exp.holdout for _, exp in exps.values()}
    if len(holdouts) > 1:
        raise UsageError("all configs must use the same holdout size")
    holdout = holdouts.pop() or max(1, len(corpus) // 10)
    if holdout >= len(corpus):
        raise UsageError("holdout leaves no training pairs")
    train_pairs, held_pairs = corpus.pairs[:-holdout], corpus.pairs[-holdout:]
    jobs = []
    for name, (text, exp) in exps.items():
        exp.model_config().vocab.check(t for s, r in corpus.pairs for t in s + r)
        jobs.append((name, text, train_pairs, held_pairs, exp.model_config().vocab.size))
    workers = _thread_cap(len(jobs))
    if workers == 1:
        results = [_compare_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_worker, jobs))
    entries = [r for r, _ in results]
    outputs = {}
    for entry, generated in results:
        outputs.setdefault(entry["variant"], generated)
    counts = {e["variant"]: e["parameters"] for e in entries}
    order = [v for v in ("LM", "LM_PA", "ED") if v in counts]
    report = {
        "train_pairs": len(train_pairs),
        "heldout_pairs": len(held_pairs),
        "models": entries,
        "lengths": length_stats(outputs),
        "parameter_counts": counts,
        "parameter_order": {
            "variants": order,
            "increasing": all(counts[a] < counts[b] for a, b in zip(order, order[1:])),
        },
    }
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for e in entries:
        m = e["metrics"]
        print(f"{e['config']} ({e['variant']}): params {e['parameters']}, bleu {m['bleu']:.4f}, "
              f"exact match {m['seq_accuracy']:.4f}, mean length {m['avg_len']:.3f}")
    if "delta_L" in report["lengths"]:
        print(f"delta_L (PALM - LM) = {report['lengths']['delta_L']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palm-lab", description="Attention degeneration lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    p.add_argument("--spec", required=True, help="task spec JSON")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--data", required=True, help="training corpus")
    p.add_argument("--out", required=True, help="checkpoint to write; the loss log goes next to it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a corpus and write metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", required=True, help="metrics JSON to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("jacobian-verify", help="closed-form Jacobians against finite differences")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--dims", default="8,6,4", help="max_d,max_N,max_i")
    p.set_defaults(func=cmd_jacobian_verify)

    p = sub.add_parser("sensitivity", help="sensitivity and perturbation ratio per step")
    p.add_argument("--mode", required=True, choices=["encoder", "cross", "palm"])
    p.add_argument("--N", type=int, default=8, help="source length")
    p.add_argument("--imax", type=int, default=32, help="last target step")
    p.add_argument("--seeds", default="16", help="seed count or comma-separated list")
    p.add_argument("--out", required=True, help="CSV to write")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("compare", help="train and evaluate every config in a directory")
    p.add_argument("--configs", required=True, help="directory of experiment config JSON files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON to write")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        import torch
        torch.set_num_threads(1)
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
