"""``neurogen`` command-line front end.

Every command reads a JSON experiment config, writes its artifacts to the
configured output directory and finishes with one MetricsRecord
(``<command>.metrics.json``). Exit codes: 0 success, 2 config error,
3 training divergence, 4 artifact mismatch, 5 unbounded-logit failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from neurogen.archspec import ArchError, accuracy, read_weights, write_weights
from neurogen.config import ConfigError, ExperimentConfig
from neurogen.generator import (
    STAGE1_INSTRUCTION,
    GeneratorError,
    GeneratorState,
    generate,
    load_generator,
    save_generator,
)
from neurogen.refcorpus import (
    RefTrainConfig,
    TrainingDivergedError,
    build_corpus,
    corpus_stats,
    peek_corpus_hash,
    read_corpus,
    train_reference,
    write_corpus,
)
from neurogen.training import (
    LossCurve,
    UnboundedLogitError,
    adapt_architecture,
    eval_context,
    final_weights,
    stage1_train,
    stage2_train,
)

log = logging.getLogger("neurogen")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_UNBOUNDED = 0, 2, 3, 4, 5


class MismatchError(Exception):
    pass


# metrics --------------------------------------------------------------------------

def write_metrics(cfg: ExperimentConfig, command: str, metrics: dict, artifacts: dict, tag: str | None = None) -> Path:
    """One MetricsRecord per completed run; contents depend only on (config, seed)."""
    out = cfg.output_dir
    name = f"{command}-{tag}" if tag else command
    record = {
        "run_id": f"{name}-{cfg.config_hash[:12]}",
        "command": command,
        "config_hash": cfg.config_hash,
        "metrics": metrics,
        "artifacts": {k: str(Path(v).name) for k, v in artifacts.items()},
    }
    path = out / f"{name}.metrics.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_curve(curve: LossCurve, path: Path) -> Path:
    curve.write_csv(path)
    return path


# commands -------------------------------------------------------------------------

def cmd_build_corpus(cfg: ExperimentConfig, args) -> dict:
    arch = cfg.arch()
    data = cfg.dataset()
    n = cfg.doc["stage1"]["N"]
    corpus = build_corpus(arch, data, N=n, base_seed=cfg.sub_seed("corpus"), config=cfg.reference_config(),
                          frozen_tables=cfg.frozen_tables(arch))
    path = cfg.output_dir / "corpus.ngpc"
    write_corpus(path, corpus)
    accs = [m.test_accuracy for _, m in corpus.entries]
    for (_, m), acc in zip(corpus.entries, accs):
        log.info("corpus seed %d: test accuracy %.4f, final train loss %.4f", m.seed, acc, m.final_train_loss)
    _, var = corpus_stats(corpus)
    metrics = {"N": n, "accuracies": accs, "mean_accuracy": float(np.mean(accs)),
               "variance_floor": float(var.mean()), "num_params": arch.num_params}
    write_metrics(cfg, "build-corpus", metrics, {"corpus": path})
    return metrics


def _check_corpus(cfg, path):
    arch = cfg.arch()
    if peek_corpus_hash(path) != arch.arch_hash:
        raise MismatchError(f"corpus {path} was built for a different architecture than {arch.name}")
    return read_corpus(path, arch)


def cmd_stage1(cfg: ExperimentConfig, args) -> dict:
    arch = cfg.arch()
    corpus = _check_corpus(cfg, Path(args.corpus))
    gen = GeneratorState(cfg.generator_config(), arch)
    data = cfg.dataset() if args.eval else None
    gen, curve = stage1_train(gen, corpus, cfg.stage1_config(), eval_data=data,
                              frozen_tables=cfg.frozen_tables(arch))
    out = cfg.output_dir
    ckpt = out / "generator_stage1.nggs"
    save_generator(ckpt, gen, extra={"stage": 1, "config_hash": cfg.config_hash})
    curve_path = _write_curve(curve, out / "stage1_curve.csv")
    w_g = generate(gen, STAGE1_INSTRUCTION).values.data.astype(np.float64)
    _, var = corpus_stats(corpus)
    metrics = {"final_loss": curve.losses[-1], "initial_loss": curve.losses[0], "variance_floor": float(var.mean()),
               "epochs": len(curve)}
    if corpus.N == 1:
        w1 = corpus.entries[0][0].values.data.astype(np.float64)
        metrics["relative_distance"] = float(np.linalg.norm(w_g - w1) / np.linalg.norm(w1))
    write_metrics(cfg, "stage1", metrics, {"generator": ckpt, "curve": curve_path})
    return metrics


def _load_gen(cfg, path) -> GeneratorState:
    gen = load_generator(path)
    arch = cfg.arch()
    if gen.arch.arch_hash != arch.arch_hash:
        raise MismatchError(f"generator {path} targets {gen.arch.name}, config asks for {arch.name}")
    return gen


def cmd_stage2(cfg: ExperimentConfig, args, command: str = "stage2") -> dict:
    arch = cfg.arch()
    phase2_only = bool(args.phase2_only or cfg.doc["ablation"]["phase2_only"])
    if args.alpha is not None:
        cfg.override("/ablation/alpha", args.alpha)
    if getattr(args, "no_clip", False):
        cfg.override("/ablation/alpha", None)
    if phase2_only:
        gen = GeneratorState(cfg.generator_config(), arch)
    else:
        if not args.generator:
            raise ConfigError("stage 2 needs --generator unless run with --phase2-only", "/ablation/phase2_only")
        gen = _load_gen(cfg, args.generator)
    data = cfg.dataset()
    softclip = cfg.softclip(phase2_only)
    instruction = cfg.instruction(arch)
    tables = cfg.frozen_tables(arch)
    config = cfg.stage2_config()
    gen, curve = stage2_train(gen, data, instruction, config, softclip=softclip,
                              stage1_done=not phase2_only, frozen_tables=tables)
    out = cfg.output_dir
    tag = "phase2only" if phase2_only else "stage2"
    w = final_weights(gen, instruction, eval_context(data, config.m, config.seed), softclip)
    weights_path = out / f"weights_{tag}.ngpw"
    write_weights(weights_path, w, arch)
    ckpt = out / f"generator_{tag}.nggs"
    save_generator(ckpt, gen, extra={"stage": 2, "phase2_only": phase2_only, "config_hash": cfg.config_hash})
    curve_path = _write_curve(curve, out / f"{tag}_curve.csv")
    metrics = {"final_accuracy": curve.accuracies[-1], "final_loss": curve.losses[-1], "epochs": len(curve),
               "phase2_only": phase2_only, "alpha": softclip.alpha if softclip.enabled else None,
               "instruction": instruction}
    write_metrics(cfg, command, metrics, {"weights": weights_path, "generator": ckpt, "curve": curve_path},
                  tag="phase2only" if phase2_only and command == "stage2" else None)
    return metrics


def cmd_ablate(cfg: ExperimentConfig, args) -> dict:
    args.phase2_only = True
    return cmd_stage2(cfg, args, command="ablate")


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    arch = cfg.arch()
    try:
        w = read_weights(args.weights, arch)
    except ArchError as exc:
        raise MismatchError(str(exc)) from None
    data = cfg.dataset()
    split = data.test if args.split == "test" else data.train
    acc = accuracy(arch, w, split.x, split.y, cfg.frozen_tables(arch))
    print(f"accuracy {acc:.4f}")
    metrics = {"accuracy": acc, "split": args.split, "weights": Path(args.weights).name}
    write_metrics(cfg, "eval", metrics, {"weights": args.weights})
    return metrics


def cmd_adapt(cfg: ExperimentConfig, args) -> dict:
    small = cfg.small_arch()
    gen = _load_gen(cfg, args.generator)
    if small.arch_hash == gen.arch.arch_hash:
        raise ConfigError("the small architecture must differ from the generator's target", "/adapt/small_arch")
    limit = args.limit if args.limit is not None else cfg.doc["adapt"].get("limit")
    data = cfg.dataset(limit=limit)
    config = cfg.stage2_config()
    tables = cfg.frozen_tables(small)
    instruction = cfg.instruction(small)
    new, curve = adapt_architecture(gen, small, data, instruction, config, frozen_tables=tables,
                                    seed=cfg.sub_seed("adapt"))
    out = cfg.output_dir
    ckpt = out / "generator_adapted.nggs"
    save_generator(ckpt, new, extra={"stage": "adapt", "config_hash": cfg.config_hash})
    w = final_weights(new, instruction, eval_context(data, config.m, config.seed))
    weights_path = out / "weights_adapted.ngpw"
    write_weights(weights_path, w, small)
    # matched classical baseline: same samples, epochs, batch size and schedule
    ref_cfg = RefTrainConfig(epochs=config.epochs, lr=cfg.doc["reference"]["lr"], batch_size=config.m,
                             halve_every=config.halve_every)
    rows: list = []
    train_reference(small, data, cfg.sub_seed("adapt-baseline"), ref_cfg, tables, curve=rows)
    baseline = LossCurve()
    for row in rows:
        baseline.append(*row)
    gen_curve = _write_curve(curve, out / "adapt_generated_curve.csv")
    base_curve = _write_curve(baseline, out / "adapt_classical_curve.csv")
    metrics = {"generated_accuracy": curve.accuracies[-1], "classical_accuracy": baseline.accuracies[-1],
               "majority_baseline": data.majority_baseline(), "train_samples": len(data.train),
               "epochs": len(curve)}
    write_metrics(cfg, "adapt", metrics, {"generator": ckpt, "weights": weights_path,
                                          "generated_curve": gen_curve, "classical_curve": base_curve})
    return metrics


def cmd_report(args) -> int:
    records = []
    for root in args.runs:
        root = Path(root)
        files = [root] if root.is_file() else sorted(root.rglob("*.metrics.json"))
        for f in files:
            records.append(json.loads(f.read_text(encoding="utf-8")))
    if not records:
        print("no metrics records found", file=sys.stderr)
        return EXIT_CONFIG
    keys = sorted({k for r in records for k, v in r["metrics"].items() if not isinstance(v, (list, dict))})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "command", "config_hash"] + keys)
    for r in sorted(records, key=lambda r: (r["run_id"], r["command"])):
        w.writerow([r["run_id"], r["command"], r["config_hash"]] + [_fmt(r["metrics"].get(k)) for k in keys])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def cmd_prepare_mnist(args) -> int:
    from neurogen.dataio import export_mnist5k

    d = export_mnist5k(args.directory, test_per_class=args.test_per_class, seed=args.seed)
    print(d)
    return EXIT_OK


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurogen", description="Generate target-network weights with a "
                                "conditioned decoder, and the classical baselines to compare against.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (per-seed corpus accuracies, ...)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        sp = sub.add_parser(name, help=help_text, parents=[common])
        sp.add_argument("config", help="experiment JSON config")
        sp.add_argument("--seed", type=int, help="override /seed")
        sp.add_argument("--output-dir", help="override /output_dir")
        sp.add_argument("--epochs", type=int, help="override the epoch count of this command's stage")
        sp.add_argument("--lr", type=float, help="override the learning rate of this command's stage")
        return sp

    sp = with_config("build-corpus", "train the classical reference checkpoints")
    sp.add_argument("--N", type=int, help="override /stage1/N")
    sp = with_config("stage1", "align the generator to a checkpoint corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--eval", action="store_true", help="log test accuracy of w_g each epoch")
    for name, text in (("stage2", "context-conditioned task tuning"),
                       ("ablate", "stage 2 from a fresh generator (no alignment), soft clipped")):
        sp = with_config(name, text)
        sp.add_argument("--generator", help="NGGS checkpoint from stage1")
        sp.add_argument("--phase2-only", action="store_true", help="start from a fresh generator")
        sp.add_argument("--alpha", type=float, help="soft-clip scale for --phase2-only")
        sp.add_argument("--no-clip", action="store_true", help="disable soft clipping in --phase2-only runs")
    sp = with_config("eval", "accuracy of an NGPW weight file")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--split", choices=["test", "train"], default="test")
    sp = with_config("adapt", "retarget a trained generator to the small architecture (stage 2 only)")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--limit", type=int, help="cap on training samples")
    sp = sub.add_parser("report", help="aggregate metrics records into one CSV", parents=[common])
    sp.add_argument("runs", nargs="+", help="run directories or metrics files")
    sp.add_argument("--out")
    sp = sub.add_parser("prepare-mnist", help="write the bundled 5k MNIST subset as IDX files (needs mlxtend)",
                        parents=[common])
    sp.add_argument("directory")
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    return p


_STAGE_SECTION = {"build-corpus": "reference", "stage1": "stage1", "stage2": "stage2", "ablate": "stage2",
                  "adapt": "stage2"}

_COMMANDS = {"build-corpus": cmd_build_corpus, "stage1": cmd_stage1, "stage2": cmd_stage2,
             "ablate": cmd_ablate, "eval": cmd_eval, "adapt": cmd_adapt}


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    if args.seed is not None:
        cfg.override("/seed", args.seed)
    if args.output_dir is not None:
        cfg.override("/output_dir", str(Path(args.output_dir).resolve()))
    section = _STAGE_SECTION.get(args.command)
    if section:
        if args.epochs is not None:
            cfg.override(f"/{section}/epochs", args.epochs)
        if args.lr is not None:
            cfg.override(f"/{section}/lr", args.lr)
    if getattr(args, "N", None) is not None:
        cfg.override("/stage1/N", args.N)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args)
    if args.command == "prepare-mnist":
        return cmd_prepare_mnist(args)
    try:
        cfg = ExperimentConfig.load(args.config)
        _apply_overrides(cfg, args)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        metrics = _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error at {exc.pointer}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except UnboundedLogitError as exc:
        print(f"unbounded-logit failure: {exc}", file=sys.stderr)
        return EXIT_UNBOUNDED
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MismatchError, ArchError, GeneratorError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    if args.command != "eval":
        print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
