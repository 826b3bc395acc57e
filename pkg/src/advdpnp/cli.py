"""Command-line entry point: ``advdpnp {train,eval,sweep,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from advdpnp import __version__
from advdpnp import tensor as T
from advdpnp._io import atomic_write_text
from advdpnp.attacks import AttackConfig, AttackError, attack_dataset
from advdpnp.checks import gradcheck_suite
from advdpnp.config import ConfigError, ExperimentConfig, load_config, validate
from advdpnp.data import IdxError
from advdpnp.losses import ce_rows
from advdpnp.metrics import MetricError, evaluate, features_csv
from advdpnp.model import (
    CheckpointError,
    extract_features,
    load_checkpoint,
    logits_graph,
    predict_labels,
    save_checkpoint,
)
from advdpnp.trainer import TrainingError, history_csv, train

logger = logging.getLogger("advdpnp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SWEEP_COLUMNS = ("kind", "value", "accuracy", "mean_loss")
CHECKPOINT_NAME = "checkpoint.advp"


class LockError(RuntimeError):
    pass


@contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".advdpnp.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------ subcommands


def run_train(cfg: ExperimentConfig) -> int:
    validate(cfg)
    out = cfg.output_dir
    with run_lock(out):
        train_set = cfg.dataset.load("train")
        num_classes = max(train_set.num_classes, cfg.dataset.load("test").num_classes)

        def on_epoch_end(state):
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{state.epoch:04d}.advp", state.params)

        params, history = train(cfg.train, train_set, cfg.architecture, num_classes, on_epoch_end=on_epoch_end)
        save_checkpoint(out / CHECKPOINT_NAME, params)
        atomic_write_text(out / "history.csv", history_csv(history))
        manifest = {"config": cfg.to_json(), "version": version_string(), "seed": cfg.seed, "created": _timestamp()}
        atomic_write_text(out / "manifest.json", _json(manifest))
    logger.info("wrote %s", out / CHECKPOINT_NAME)
    return EXIT_OK


def _load_params(cfg: ExperimentConfig, checkpoint: Path):
    try:
        params = load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {checkpoint}") from None
    if params.arch != cfg.architecture:
        raise ConfigError(f"checkpoint architecture {params.arch} does not match config {cfg.architecture}")
    return params


def run_eval(cfg: ExperimentConfig, checkpoint: Path) -> int:
    validate(cfg)
    params = _load_params(cfg, checkpoint)
    test = cfg.dataset.load("test")
    ev = cfg.evaluation
    report, f_clean, f_adv = evaluate(params, test, list(ev.attacks), ev.geometry_attack, cfg.seed,
                                      cfg.train.effective_weights(), ev.batch_size)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", report.to_json(checkpoint=str(checkpoint), created=_timestamp()))
    if params.arch.feature_dim == 2:
        atomic_write_text(out / "features.csv", features_csv(test.labels, {"clean": f_clean, "adv": f_adv}))
    print(report.to_json(), end="")
    return EXIT_OK


def _mean_ce(params, x_adv, y) -> float:
    logits = logits_graph(T.Tensor(extract_features(params, x_adv)), T.Tensor(params.bank.prototypes),
                          params.bank.radius)
    return float(np.mean(ce_rows(logits, y).data))


def sweep_rows(cfg: ExperimentConfig, params, test) -> list[tuple]:
    """(kind, value, accuracy, mean adversarial CE) for each requested sweep."""
    sw = cfg.sweep
    base = sw.attack
    weights = cfg.train.effective_weights()
    x, y = test.inputs, test.labels
    rows = []

    def measure(kind, value, attack: AttackConfig):
        x_adv = attack_dataset(params, x, y, attack, cfg.seed, weights, cfg.evaluation.batch_size)
        acc = float(np.mean(predict_labels(params, x_adv) == y))
        rows.append((kind, value, acc, _mean_ce(params, x_adv, y)))

    for eps in sw.eps_grid:
        measure("eps-fgsm", eps, base.with_(name="fgsm", method="fgsm", norm="linf", eps=eps, restarts=1))
        # 20 steps of 2.5 * eps / 20; the step is irrelevant when eps = 0
        step = 2.5 * eps / 20 if eps > 0 else 1.0
        measure("eps-pgd", eps, base.with_(name="pgd20", eps=eps, step=step, iterations=20, restarts=1))
    for it in sw.iteration_grid:
        measure("iterations", it, base.with_(iterations=it, restarts=1))
    for r in sw.restart_grid:
        measure("restarts", r, base.with_(iterations=sw.restart_iterations, restarts=r))
    if sw.objectives:
        for objective in ("ce", "composite"):
            measure("objective", objective, base.with_(objective=objective, restarts=1))
    return rows


def run_sweep(cfg: ExperimentConfig, checkpoint: Path) -> int:
    validate(cfg)
    if not cfg.sweep.any_requested():
        raise ConfigError("sweep: no grid requested")
    params = _load_params(cfg, checkpoint)
    rows = sweep_rows(cfg, params, cfg.dataset.load("test"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for kind, value, acc, loss in rows:
        writer.writerow([kind, value, repr(acc), repr(loss)])
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(cfg.output_dir / "sweep.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


def run_gradcheck(cfg: ExperimentConfig | None, seed: int | None = None) -> int:
    gc = cfg.gradcheck if cfg else None
    seeds, step, tol = (gc.seeds, gc.step, gc.tolerance) if gc else (20, 1e-5, 1e-4)
    start = seed if seed is not None else (cfg.seed if cfg else 0)
    errors = gradcheck_suite(seeds, step, start)
    failed = [k for k, v in errors.items() if v > tol]
    for name, err in errors.items():
        print(f"{name:10s} max_rel_err={err:.3e} {'FAIL' if name in failed else 'ok'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advdpnp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sweep", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "gradcheck")
        p.add_argument("--out-dir", type=Path)
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name in ("eval", "sweep"):
            p.add_argument("--checkpoint", type=Path, help=f"defaults to <out-dir>/{CHECKPOINT_NAME}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None:
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            if args.out_dir is not None:
                cfg = cfg.with_output_dir(args.out_dir)
        if args.command == "gradcheck":
            return run_gradcheck(cfg, args.seed)
        if args.command == "train":
            return run_train(cfg)
        checkpoint = args.checkpoint or cfg.output_dir / CHECKPOINT_NAME
        if args.command == "eval":
            return run_eval(cfg, checkpoint)
        return run_sweep(cfg, checkpoint)
    except (ConfigError, CheckpointError, IdxError, LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, AttackError, T.TensorError, MetricError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
