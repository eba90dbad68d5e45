"""Command-line entry point.

Subcommands: train, evaluate, attack, export-logits, gradcheck.
Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 verification failure.

Every command is a pure function of (config file, dataset files, seed) to
its output files; reruns produce bit-identical outputs. To keep that true
across machines the BLAS thread count defaults to 1; raise it with
--threads or ADVDA_THREADS. The kernel backend in use is recorded in the
resolved-config snapshot, and a snapshot that pins a backend wins over the
ADVDA_BACKEND environment variable on re-runs.

Heavy imports happen inside main() so the thread environment can be set
first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def _apply_thread_env(threads: int | None) -> int:
    n = threads or int(os.environ.get("ADVDA_THREADS", "0") or 0) or 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advda", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config JSON")
        sp.add_argument("--out", default=None,
                        help="output directory (default: config output_dir; env ADVDA_OUT)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default 1 for reproducibility)")

    sp = sub.add_parser("train", help="run one training regime end to end")
    common(sp)
    sp.add_argument("--subset", type=int, default=None,
                    help="override the stratified train subset size (total examples)")

    sp = sub.add_parser("evaluate", help="defense accuracy, sensitivity, and MMD report")
    common(sp)
    sp.add_argument("--defended", required=True, help="checkpoint to score")
    sp.add_argument("--holdout", required=True, help="checkpoint that crafts black-box attacks")
    sp.add_argument("--name", default="defended", help="row label in the report CSV")

    sp = sub.add_parser("attack", help="write an adversarial copy of the test set")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", required=True,
                    choices=["fgsm", "fgsm-variant", "pgd", "noisy-pgd", "rfgsm", "mim"])
    sp.add_argument("--epsilon", type=float, default=None, help="override the config ε")

    sp = sub.add_parser("export-logits", help="CSV logit embeddings for train/test/adv sets")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(sp, config_required=False)
    sp.add_argument("--trials", type=int, default=20)
    return p


def _out_dir(args, cfg) -> Path:
    out = args.out or os.environ.get("ADVDA_OUT") or cfg.output_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args):
    from advda.config import ExperimentConfig

    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _resolved_snapshot(cfg, out_dir: Path, threads: int) -> dict:
    from advda import kernels

    resolved = cfg.to_dict()
    resolved["backend"] = cfg.backend or kernels.BACKEND
    resolved["threads"] = threads
    resolved["output_dir"] = str(out_dir)
    return resolved


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def cmd_train(args) -> int:
    from advda import evaluate
    from advda.config import load_datasets
    from advda.models import load_checkpoint, save_checkpoint
    from advda.trainer import Regime, train, write_training_log

    cfg = _load_config(args)
    if args.subset is not None:
        if args.subset <= 0:
            print(f"--subset: must be positive, got {args.subset}", file=sys.stderr)
            return EXIT_CONFIG
    out_dir = _out_dir(args, cfg)
    train_ds, test_ds = load_datasets(cfg, subset_override=args.subset)

    static = None
    if Regime(cfg.regime).needs_static_models:
        static = tuple(load_checkpoint(p) for p in cfg.static_models)

    result = train(
        regime=cfg.regime,
        arch=cfg.arch if isinstance(cfg.arch, str) else _arch_from_dict(cfg.arch),
        train_data=train_ds,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        epsilon=cfg.epsilon,
        lam=cfg.lam,
        center_rate=cfg.center_rate,
        center_init=cfg.center_init,
        coral_ddof=cfg.coral_ddof,
        lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        adam_eps=cfg.optimizer.eps,
        static_models=static,
        attack_overrides=cfg.attack_overrides,
        sat_loss_blend=cfg.sat_loss_blend,
        early_stop_patience=cfg.early_stop.patience if cfg.early_stop.enabled else 0,
        early_stop_val_fraction=cfg.early_stop.val_fraction,
        checkpoint_dir=out_dir,
        checkpoint_every=cfg.checkpoint_every,
    )

    correct, n = evaluate.clean_accuracy(result.model, test_ds.images, test_ds.labels,
                                         cfg.eval_batch_size)
    clean_acc = correct / n
    meta = {
        "regime": cfg.regime,
        "epsilon": cfg.epsilon,
        "config_fingerprint": cfg.fingerprint(),
        "clean_test_accuracy": clean_acc,
    }
    save_checkpoint(result.model, out_dir / "checkpoint.advda", extra_meta=meta)
    write_training_log(result.log_rows, out_dir / "training_log.csv")
    import numpy as np

    np.save(out_dir / "centers.npy", result.centers.centers)
    threads = int(os.environ.get("OPENBLAS_NUM_THREADS", "1") or 1)
    _write_json(out_dir / "resolved_config.json", _resolved_snapshot(cfg, out_dir, threads))
    _write_json(out_dir / "summary.json", {
        "regime": cfg.regime,
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "steps": len(result.log_rows),
        "final_total_loss": result.log_rows[-1]["total"] if result.log_rows else None,
        "clean_test_accuracy": clean_acc,
        "config_fingerprint": cfg.fingerprint(),
    })
    print(f"trained {cfg.regime} for {result.epochs_run} epochs "
          f"({len(result.log_rows)} steps); clean test accuracy {100 * clean_acc:.1f}%")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def _arch_from_dict(d):
    from advda.models import ArchSpec

    return ArchSpec.from_dict(d)


def cmd_evaluate(args) -> int:
    from advda import evaluate
    from advda.config import load_datasets
    from advda.models import load_checkpoint

    cfg = _load_config(args)
    out_dir = _out_dir(args, cfg)
    _, test_ds = load_datasets(cfg)
    defended = load_checkpoint(args.defended)
    holdout = load_checkpoint(args.holdout)
    if defended.num_classes != test_ds.num_classes:
        print(f"checkpoint has {defended.num_classes} classes, dataset has "
              f"{test_ds.num_classes}", file=sys.stderr)
        return EXIT_CONFIG
    if defended.arch.input_shape != tuple(test_ds.image_shape):
        print(f"checkpoint expects input {defended.arch.input_shape}, dataset provides "
              f"{test_ds.image_shape}", file=sys.stderr)
        return EXIT_CONFIG

    report = evaluate.defense_accuracy(
        defended, holdout, test_ds, cfg.epsilon, seed=cfg.seed,
        attack_overrides=cfg.attack_overrides, batch_size=cfg.eval_batch_size,
        config_fingerprint=cfg.fingerprint(),
        trained_epsilon=defended.meta.get("epsilon"),
    )
    sensitivity = evaluate.local_loss_sensitivity(defended, test_ds, cfg.eval_batch_size)
    mmd = evaluate.mmd_distance_report(defended, test_ds, cfg.epsilon, seed=cfg.seed,
                                       attack_overrides=cfg.attack_overrides,
                                       batch_size=cfg.eval_batch_size)
    payload = report.to_dict()
    payload["local_loss_sensitivity"] = sensitivity
    payload["mmd_distance"] = mmd
    payload["defense"] = args.name
    _write_json(out_dir / f"report_{args.name}.json", payload)
    csv_path = out_dir / f"report_{args.name}.csv"
    with open(csv_path, "w") as f:
        f.write(report.csv_header() + "\n")
        f.write(report.csv_row(args.name) + "\n")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(report.csv_header())
    print(report.csv_row(args.name))
    print(f"sensitivity {sensitivity:.4g}; mmd fgsm {mmd['fgsm']:.4g}, pgd {mmd['pgd']:.4g}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from advda import evaluate
    from advda.attacks import verify_linf_ball
    from advda.config import load_datasets
    from advda.data import Dataset, write_csv_dataset
    from advda.models import load_checkpoint

    cfg = _load_config(args)
    epsilon = cfg.epsilon if args.epsilon is None else args.epsilon
    if epsilon < 0 or epsilon > 1:
        print(f"--epsilon: must be in [0, 1], got {epsilon}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _out_dir(args, cfg)
    _, test_ds = load_datasets(cfg)
    model = load_checkpoint(args.checkpoint)
    adv = evaluate.craft_adversaries(
        model, test_ds.images, test_ds.labels, args.kind, epsilon, seed=cfg.seed,
        overrides=cfg.attack_overrides.get(args.kind), batch_size=cfg.eval_batch_size)
    try:
        verify_linf_ball(test_ds.images, adv, epsilon)
    except ValueError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    adv_ds = Dataset(images=adv, labels=test_ds.labels.copy(),
                     num_classes=test_ds.num_classes, split=f"{test_ds.split}-{args.kind}",
                     ids=test_ds.ids.copy(),
                     provenance={**test_ds.provenance, "attack": args.kind,
                                 "epsilon": epsilon, "seed": cfg.seed})
    path = out_dir / f"adversarial_{args.kind}.csv"
    write_csv_dataset(adv_ds, path)
    print(f"wrote {len(adv)} adversarial examples to {path}")
    return EXIT_OK


def cmd_export_logits(args) -> int:
    from advda import evaluate
    from advda.config import load_datasets
    from advda.models import load_checkpoint

    cfg = _load_config(args)
    out_dir = _out_dir(args, cfg)
    train_ds, test_ds = load_datasets(cfg)
    model = load_checkpoint(args.checkpoint)
    adv = {
        kind: evaluate.craft_adversaries(
            model, test_ds.images, test_ds.labels, kind, cfg.epsilon, seed=cfg.seed,
            overrides=cfg.attack_overrides.get(kind), batch_size=cfg.eval_batch_size)
        for kind in ("fgsm", "pgd")
    }
    paths = evaluate.export_logits(model, {
        "train": (train_ds.images, train_ds.labels, train_ds.ids),
        "test": (test_ds.images, test_ds.labels, test_ds.ids),
        "fgsm-adv": (adv["fgsm"], test_ds.labels, test_ds.ids),
        "pgd-adv": (adv["pgd"], test_ds.labels, test_ds.ids),
    }, out_dir, batch_size=cfg.eval_batch_size)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from advda.gradcheck import run_suite

    reports = run_suite(trials=args.trials)
    width = max(len(r.name) for r in reports)
    print(f"{'op':<{width}}  {'max rel err':>12}  result")
    failed = 0
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<{width}}  {r.max_rel_err:>12.3e}  {status}")
    print(f"{len(reports) - failed}/{len(reports)} ops passed (tolerance {reports[0].tol})")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def _peek_config(path) -> dict:
    """Read backend/threads from the raw config before any numpy import, so
    a snapshot that pins them actually governs the run."""
    try:
        with open(path) as f:
            raw = json.load(f)
        return raw if isinstance(raw, dict) else {}
    except (OSError, json.JSONDecodeError):
        return {}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    peeked = _peek_config(args.config) if getattr(args, "config", None) else {}
    if peeked.get("backend") in ("numba", "numpy"):
        os.environ["ADVDA_BACKEND"] = peeked["backend"]
    threads = args.threads or (peeked.get("threads") if isinstance(peeked.get("threads"), int) else None)
    _apply_thread_env(threads)

    from advda.config import ConfigError
    from advda.data import DataError
    from advda.models import ArchError

    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "attack": cmd_attack,
        "export-logits": cmd_export_logits,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError, ArchError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        from advda.trainer import TrainingDiverged

        if isinstance(e, TrainingDiverged):
            print(f"training diverged: {e}", file=sys.stderr)
            return EXIT_DIVERGED
        raise


if __name__ == "__main__":
    sys.exit(main())
