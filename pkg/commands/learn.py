"""train, eval, predict and sweep: everything that touches the classifier."""
import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from utils.adjacency import AdjacencyVariant
from utils.dynamics import find_equilibrium, read_trajectory_csv
from utils.errors import ContractError, FingerprintMismatchError, TrajectoryFormatError
from utils.grid import load_grid
from utils.manifest import RunRecorder
from utils.model import build_model, load_checkpoint, save_checkpoint
from utils.sampling import load_dataset, load_split_index, save_split_index, split_dataset, split_index_path
from utils.training import evaluate, train as fit, write_history_csv, write_metrics_json
from commands.options import (
    add_model,
    add_seed,
    add_training,
    model_config_from,
    train_config_from,
)

logger = logging.getLogger(__name__)


def _load_splits(args, recorder, grid):
    recorder.input("data", args.data)
    single = load_dataset(args.data)
    if single.fingerprint != grid.fingerprint:
        raise FingerprintMismatchError(f"{args.data} was generated on a different grid than {args.grid}")
    multi = None
    if args.multi:
        recorder.input("multi", args.multi)
        multi = load_dataset(args.multi)
    if getattr(args, "splits", None):
        recorder.input("splits", args.splits)
        return load_split_index(args.splits, single, multi)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(2,)))
    return split_dataset(single, multi, rng)


def _fresh_model(grid, config, seed):
    equilibrium = find_equilibrium(grid) if config.variant == AdjacencyVariant.POWER_FLOW else None
    return build_model(grid, config, np.random.SeedSequence(seed, spawn_key=(3,)), equilibrium)


def train(args):
    recorder = RunRecorder("train", args.argv, args.settings.run_dir)
    recorder.input("grid", args.grid)
    grid = load_grid(args.grid)
    recorder.manifest.fingerprint = grid.fingerprint
    train_set, val_set, test_set = _load_splits(args, recorder, grid)

    config = model_config_from(args, grid.n_nodes, train_set.window, train_set.dt)
    train_config = train_config_from(args)
    recorder.manifest.config.update(model=config.to_dict(), training=train_config.to_dict())
    recorder.manifest.seeds["seed"] = args.seed
    print(f"Splits: train={len(train_set)} val={len(val_set)} test={len(test_set)}")

    model = _fresh_model(grid, config, args.seed)
    with recorder.stage("train"):
        result = fit(model, train_set, val_set, train_config)
    save_checkpoint(model, args.out)
    recorder.output("checkpoint", args.out)
    index_path = save_split_index((train_set, val_set, test_set), split_index_path(args.out), args.seed)
    recorder.output("splits", index_path)

    history_path = args.history or f"{args.out}.history.csv"
    write_history_csv(result.history, history_path)
    recorder.output("history", history_path)
    if result.history:
        print(f"Trained {len(result.history)} epoch(s), best validation epoch {result.best_epoch}"
              f"{' (stopped early)' if result.stopped_early else ''}")

    if len(test_set):
        with recorder.stage("evaluate"):
            metrics = evaluate(model, test_set)
        metrics_path = f"{args.out}.metrics.json"
        write_metrics_json(metrics, metrics_path, extra={"split": "test", "samples": len(test_set)})
        recorder.output("metrics", metrics_path)
        print(f"Test: {metrics.summary()}")
    print(f"Checkpoint written to {args.out}")
    recorder.finish()
    return 0


def eval_checkpoint(args):
    recorder = RunRecorder("eval", args.argv, args.settings.run_dir)
    recorder.input("checkpoint", args.checkpoint)
    recorder.input("data", args.data)
    grid = None
    if args.grid:
        recorder.input("grid", args.grid)
        grid = load_grid(args.grid)
    model = load_checkpoint(args.checkpoint, grid)
    recorder.manifest.fingerprint = model.fingerprint
    dataset = load_dataset(args.data)

    with recorder.stage("evaluate"):
        metrics = evaluate(model, dataset, args.threshold)
    print(metrics.summary())
    if args.out:
        write_metrics_json(metrics, args.out, extra={"samples": len(dataset)})
        recorder.output("metrics", args.out)
    else:
        print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    recorder.finish()
    return 0


def predict(args):
    recorder = RunRecorder("predict", args.argv, args.settings.run_dir)
    recorder.input("checkpoint", args.checkpoint)
    recorder.input("trajectory", args.trajectory)
    grid = load_grid(args.grid) if args.grid else None
    model = load_checkpoint(args.checkpoint, grid)
    recorder.manifest.fingerprint = model.fingerprint
    window = model.config.window

    trajectory = read_trajectory_csv(args.trajectory, model.config.n_nodes)
    if len(trajectory) > 1 and not math.isclose(trajectory.dt, model.config.dt, rel_tol=1e-9):
        raise TrajectoryFormatError(
            f"{args.trajectory}: sampled every {trajectory.dt:g} s, the model was trained on {model.config.dt:g} s")
    if len(trajectory) < window:
        raise TrajectoryFormatError(
            f"{args.trajectory}: has {len(trajectory)} samples, the model reads the first {window}")
    x = trajectory.omega[:window].T[None, :, :]
    with recorder.stage("predict"):
        p = float(model.predict_proba(x)[0])
    print(f"p = {p:.6f}")
    print(f"Verdict: {'stable' if p > args.threshold else 'unstable'}")
    recorder.finish()
    return 0


def _latency_ms(model, x, repeats):
    # single-sample forward passes, the way a monitoring loop would call the model
    picks = x[:repeats]
    start = time.perf_counter()
    for sample in picks:
        model.predict_proba(sample[None])
    return 1000.0 * (time.perf_counter() - start) / max(len(picks), 1)


def sweep(args):
    recorder = RunRecorder("sweep", args.argv, args.settings.run_dir)
    recorder.input("grid", args.grid)
    grid = load_grid(args.grid)
    recorder.manifest.fingerprint = grid.fingerprint
    splits = _load_splits(args, recorder, grid)
    try:
        windows = sorted({int(w) for w in args.windows.split(",") if w.strip()})
    except ValueError:
        raise ContractError(f"--windows must be a comma-separated list of integers, got '{args.windows}'") from None
    if not windows:
        raise ContractError("--windows is empty")
    train_config = train_config_from(args)
    recorder.manifest.config.update(windows=windows, training=train_config.to_dict())
    recorder.manifest.seeds["seed"] = args.seed

    rows = []
    for window in windows:
        train_set, val_set, test_set = (s.truncate(window) for s in splits)
        config = model_config_from(args, grid.n_nodes, window, train_set.dt)
        model = _fresh_model(grid, config, args.seed)
        with recorder.stage(f"train_T{window}"):
            fit(model, train_set, val_set, train_config)
        x, _ = test_set.arrays()
        if not len(x):
            raise ContractError("test split is empty; generate more samples")
        metrics = evaluate(model, test_set)
        latency = _latency_ms(model, x, args.latency_samples)
        rows.append([window, metrics.acc, metrics.fpr, metrics.fnr, metrics.auc, latency])
        print(f"T={window:>4}: {metrics.summary()} infer={latency:.3f} ms/sample")

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["window", "acc", "fpr", "fnr", "auc", "infer_ms"])
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    recorder.output("sweep", args.out, hashed=False)
    print(f"Sweep written to {args.out}")
    recorder.finish()
    return 0


def setup(subparsers, settings):
    parser = subparsers.add_parser("train", help="split a dataset and train the classifier")
    parser.add_argument("--grid", required=True, help="grid the dataset was generated on")
    parser.add_argument("--data", required=True, help="single-node dataset (split 60/20/20)")
    parser.add_argument("--multi", help="multi-node dataset, appended to the test split")
    parser.add_argument("--out", required=True, help="checkpoint file to write")
    parser.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    parser.add_argument("--splits", help="reuse the split index a previous train run wrote (<out>.splits.json)")
    add_seed(parser, settings)
    add_model(parser)
    add_training(parser)
    parser.set_defaults(func=train)

    parser = subparsers.add_parser("eval", help="score a checkpoint on a dataset")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--grid", help="also check the checkpoint against this grid")
    parser.add_argument("--threshold", type=float, default=0.5, help="predict stable when p > threshold")
    parser.add_argument("--out", help="metrics JSON file (default: print)")
    parser.set_defaults(func=eval_checkpoint)

    parser = subparsers.add_parser("predict", help="classify one exported trajectory")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--trajectory", required=True, help="trajectory CSV written by simulate")
    parser.add_argument("--grid", help="also check the checkpoint against this grid")
    parser.add_argument("--threshold", type=float, default=0.5)
    parser.set_defaults(func=predict)

    parser = subparsers.add_parser("sweep", help="accuracy and inference time against input length T")
    parser.add_argument("--grid", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--multi")
    parser.add_argument("--windows", default="10,20,40,60,80,101", help="comma-separated T values")
    parser.add_argument("--latency-samples", type=int, default=100, help="single-sample passes timed per T")
    parser.add_argument("--out", required=True, help="sweep CSV to write")
    add_seed(parser, settings)
    add_model(parser)
    add_training(parser)
    parser.set_defaults(func=sweep)
