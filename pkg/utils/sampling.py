"""
Perturbation sampling and dataset generation.

Each sample starts from the synchronized equilibrium with uniform frequency
kicks on one node (single mode) or on a chosen combination of m nodes (multi
mode). The kicked state is integrated once to the labeling horizon; the first
T omega samples become the N x T input matrix and the verdict becomes the label.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import StabilitySettings, SystemState, classify_batch, find_equilibrium
from .errors import (
    ContractError,
    DatasetFormatError,
    DatasetVersionError,
    FingerprintCorruptionError,
    FingerprintMismatchError,
    NotADatasetError,
    TruncatedRecordError,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"TTDS"
DATASET_VERSION = 1
CHUNK_SIZE = 512
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PerturbationSpec:
    mode: str = "single"
    omega_bound: float = 20.0
    m: int = 1
    per_node: int = 1000
    combos: int = 60
    per_combo: int = 1000
    seed: int = 0
    window: int = 101
    perturb_delta: bool = False
    stability: StabilitySettings = field(default_factory=StabilitySettings)

    def validate(self, n_nodes):
        if self.mode not in ("single", "multi"):
            raise ContractError(f"unknown perturbation mode '{self.mode}'")
        m = 1 if self.mode == "single" else self.m
        if not 1 <= m < max(n_nodes, 2):
            raise ContractError(f"need 1 <= m < N, got m={m}, N={n_nodes}")
        if not self.omega_bound > 0:
            raise ContractError(f"omega bound must be positive, got {self.omega_bound}")
        counts = (self.per_node,) if self.mode == "single" else (self.combos, self.per_combo)
        if min(counts) < 1:
            raise ContractError("sample counts must be at least 1")
        if not 1 <= self.window <= self.stability.n_steps + 1:
            raise ContractError(f"window {self.window} exceeds the {self.stability.n_steps + 1}-sample horizon")

    def expected_count(self, n_nodes):
        if self.mode == "single":
            return n_nodes * self.per_node
        return self.combos * self.per_combo

    def to_dict(self):
        data = asdict(self)
        data["stability"] = self.stability.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["stability"] = StabilitySettings.from_dict(data.get("stability", {}))
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Sample:
    omega: np.ndarray
    label: int
    nodes: tuple
    seed: int

    @property
    def kicks(self):
        return self.omega[list(self.nodes), 0]


@dataclass(eq=False)
class Dataset:
    fingerprint: str
    n_nodes: int
    window: int
    samples: list = field(default_factory=list)
    splits: list | None = None
    spec: dict | None = None
    origin: list | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def dt(self):
        stability = (self.spec or {}).get("stability") or {}
        return float(stability.get("dt", StabilitySettings.dt))

    @property
    def class_counts(self):
        stable = sum(1 for s in self.samples if s.label == 1)
        return {"stable": stable, "unstable": len(self.samples) - stable}

    def arrays(self):
        """Stacked (S, N, T) inputs and (S,) labels."""
        if not self.samples:
            return np.zeros((0, self.n_nodes, self.window)), np.zeros(0, dtype=np.uint8)
        x = np.stack([s.omega for s in self.samples])
        y = np.array([s.label for s in self.samples], dtype=np.uint8)
        return x, y

    def truncate(self, window):
        if not 1 <= window <= self.window:
            raise ContractError(f"cannot truncate a T={self.window} dataset to T={window}")
        samples = [replace(s, omega=s.omega[:, :window]) for s in self.samples]
        return Dataset(self.fingerprint, self.n_nodes, window, samples, self.splits, self.spec, self.origin)


def sample_seed(seed, index):
    """Per-sample 64-bit stream seed, independent of generation order."""
    return int(np.random.SeedSequence(seed, spawn_key=(1, index)).generate_state(1, np.uint64)[0])


def sample_initial_state(grid, equilibrium, nodes, rng, omega_bound=20.0, perturb_delta=False):
    nodes = sorted(int(i) for i in nodes)
    if not nodes:
        raise ContractError("perturbed node set is empty")
    if nodes[0] < 0 or nodes[-1] >= grid.n_nodes or len(set(nodes)) != len(nodes):
        raise ContractError(f"perturbed nodes {nodes} are not distinct nodes of an N={grid.n_nodes} grid")
    delta = np.array(equilibrium.delta, dtype=np.float64)
    omega = np.array(equilibrium.omega, dtype=np.float64)
    omega[nodes] += rng.uniform(-omega_bound, omega_bound, size=len(nodes))
    if perturb_delta:
        delta[nodes] += rng.uniform(-np.pi, np.pi, size=len(nodes))
    return SystemState(delta, omega)


def choose_combinations(n_nodes, m, count, rng):
    """Draws ``count`` distinct m-node combinations uniformly without replacement."""
    total = math.comb(n_nodes, m)
    if count > total:
        raise ContractError(f"cannot choose {count} distinct combinations from C({n_nodes}, {m}) = {total}")
    if total <= 1_000_000:
        every = list(itertools.combinations(range(n_nodes), m))
        picked = rng.choice(total, size=count, replace=False)
        return [every[int(k)] for k in picked]

    # Too many to enumerate: rejection sampling on sorted draws
    chosen, seen = [], set()
    while len(chosen) < count:
        combo = tuple(sorted(int(i) for i in rng.choice(n_nodes, size=m, replace=False)))
        if combo not in seen:
            seen.add(combo)
            chosen.append(combo)
    return chosen


def _plan(grid, spec):
    if spec.mode == "single":
        return [(i,) for i in range(grid.n_nodes) for _ in range(spec.per_node)]
    combo_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    combos = choose_combinations(grid.n_nodes, spec.m, spec.combos, combo_rng)
    return [combo for combo in combos for _ in range(spec.per_combo)]


def _run_chunk(grid, equilibrium, spec, chunk):
    # chunk: list of (nodes, seed); runs in a worker process when threads > 1
    deltas, omegas = [], []
    for nodes, seed in chunk:
        rng = np.random.default_rng(seed)
        state = sample_initial_state(grid, equilibrium, nodes, rng, spec.omega_bound, spec.perturb_delta)
        deltas.append(state.delta)
        omegas.append(state.omega)
    labels, _, _, blown, recorded = classify_batch(
        grid, np.array(deltas), np.array(omegas), spec.stability, record=spec.window)
    return labels, blown, recorded


def generate_dataset(grid, spec, equilibrium=None, workers=1):
    spec.validate(grid.n_nodes)
    if equilibrium is None:
        equilibrium = find_equilibrium(grid)
    plan = _plan(grid, spec)
    seeds = [sample_seed(spec.seed, k) for k in range(len(plan))]
    jobs = [list(zip(plan[k:k + CHUNK_SIZE], seeds[k:k + CHUNK_SIZE])) for k in range(0, len(plan), CHUNK_SIZE)]
    logger.info("Generating %d %s-mode samples on '%s' in %d chunk(s)", len(plan), spec.mode, grid.name, len(jobs))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, itertools.repeat(grid), itertools.repeat(equilibrium),
                                    itertools.repeat(spec), jobs))
    else:
        results = [_run_chunk(grid, equilibrium, spec, job) for job in jobs]

    samples, n_blown = [], 0
    for job, (labels, blown, recorded) in zip(jobs, results):
        n_blown += int(blown.sum())
        for (nodes, seed), label, omega in zip(job, labels, recorded):
            samples.append(Sample(omega, int(label), tuple(nodes), seed))

    dataset = Dataset(grid.fingerprint, grid.n_nodes, spec.window, samples, spec=spec.to_dict())
    counts = dataset.class_counts
    logger.info("Generated %d samples: %d stable, %d unstable (%d blew up)",
                len(dataset), counts["stable"], counts["unstable"], n_blown)
    return dataset


def split_dataset(single, multi, rng, fractions=(0.6, 0.2)):
    """
    Shuffles the single-node samples into train/val/test by ``fractions`` and
    appends every multi-node sample to test.
    """
    _check_pair(single, multi)
    n = len(single)
    order = rng.permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    out = _assemble(single, multi, parts)
    logger.info("Split %d single + %d multi samples into %d/%d/%d", n, len(multi or []),
                len(out[0]), len(out[1]), len(out[2]))
    return out


def _check_pair(single, multi):
    if multi is not None and len(multi) and multi.fingerprint != single.fingerprint:
        raise FingerprintMismatchError("single- and multi-node datasets come from different grids")
    if multi is not None and len(multi) and multi.window != single.window:
        raise ContractError(f"window mismatch: {single.window} vs {multi.window}")


def _assemble(single, multi, parts):
    out = []
    for name, index in zip(SPLITS, parts):
        samples = [single.samples[int(k)] for k in index]
        origin = [("single", int(k)) for k in index]
        if name == "test" and multi is not None:
            samples += list(multi.samples)
            origin += [("multi", k) for k in range(len(multi))]
        out.append(Dataset(single.fingerprint, single.n_nodes, single.window, samples,
                           [name] * len(samples), single.spec, origin))
    return tuple(out)


def split_index_path(path):
    path = Path(path)
    return path.with_name(path.name + ".splits.json")


def save_split_index(splits, path, seed=None):
    """
    Records which single-node sample went to which split, so a later run can
    rebuild exactly the same train/val/test sets.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": 1, "fingerprint": splits[0].fingerprint, "seed": seed}
    for name, part in zip(SPLITS, splits):
        if part.origin is None:
            raise ContractError(f"split '{name}' does not remember where its samples came from")
        doc[name] = [k for source, k in part.origin if source == "single"]
    doc["multi"] = sum(1 for part in splits for source, _ in part.origin if source == "multi")
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_split_index(path, single, multi=None):
    """Rebuilds the splits recorded by save_split_index from the same datasets."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetFormatError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict) or not all(isinstance(doc.get(name), list) for name in SPLITS):
        raise DatasetFormatError(f"{path}: not a split index")
    if doc.get("fingerprint") != single.fingerprint:
        raise FingerprintMismatchError(f"{path}: split index belongs to a different grid")
    _check_pair(single, multi)

    parts = tuple(doc[name] for name in SPLITS)
    flat = sorted(int(k) for part in parts for k in part)
    if flat != list(range(len(single))):
        raise DatasetFormatError(f"{path}: split index does not cover the {len(single)} single-node samples")
    if doc.get("multi", 0) != len(multi or []):
        raise DatasetFormatError(f"{path}: split index expects {doc.get('multi', 0)} multi-node samples, "
                                 f"got {len(multi or [])}")
    return _assemble(single, multi, parts)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(dataset, path):
    """
    Writes the binary dataset file plus a JSON sidecar manifest next to it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, t = dataset.n_nodes, dataset.window
    with open(path, "wb") as handle:
        handle.write(DATASET_MAGIC)
        handle.write(struct.pack("<H", DATASET_VERSION))
        handle.write(bytes.fromhex(dataset.fingerprint))
        handle.write(struct.pack("<III", n, t, len(dataset)))
        for sample in dataset.samples:
            bitmap = np.zeros(n, dtype=np.uint8)
            bitmap[list(sample.nodes)] = 1
            handle.write(struct.pack("<B", sample.label))
            handle.write(np.packbits(bitmap, bitorder="little").tobytes())
            handle.write(struct.pack("<Q", sample.seed))
            handle.write(np.ascontiguousarray(sample.omega, dtype="<f8").tobytes())

    manifest = {
        "format": "TTDS",
        "version": DATASET_VERSION,
        "fingerprint": dataset.fingerprint,
        "n_nodes": n,
        "window": t,
        "count": len(dataset),
        "class_counts": dataset.class_counts,
        "spec": dataset.spec,
    }
    if dataset.splits is not None:
        manifest["split_counts"] = {name: dataset.splits.count(name) for name in SPLITS}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read(handle, size):
    data = handle.read(size)
    if len(data) != size:
        raise TruncatedRecordError("unexpected end of record")
    return data


def load_dataset(path):
    path = Path(path)
    try:
        handle = open(path, "rb")
    except OSError as e:
        raise DatasetFormatError(f"{path}: {e.strerror or e}") from e
    with handle:
        if handle.read(4) != DATASET_MAGIC:
            raise NotADatasetError(f"{path}: not a dataset file")
        (version,) = struct.unpack("<H", _read(handle, 2))
        if version != DATASET_VERSION:
            raise DatasetVersionError(f"{path}: dataset version {version} is not supported (expected {DATASET_VERSION})")
        fingerprint = _read(handle, 32).hex()
        n, t, count = struct.unpack("<III", _read(handle, 12))
        bitmap_bytes = (n + 7) // 8
        samples = []
        for _ in range(count):
            (label,) = struct.unpack("<B", _read(handle, 1))
            bits = np.unpackbits(np.frombuffer(_read(handle, bitmap_bytes), dtype=np.uint8), bitorder="little")[:n]
            (seed,) = struct.unpack("<Q", _read(handle, 8))
            omega = np.frombuffer(_read(handle, 8 * n * t), dtype="<f8").reshape(n, t).astype(np.float64)
            samples.append(Sample(omega, int(label), tuple(int(i) for i in np.flatnonzero(bits)), int(seed)))
        if handle.read(1):
            raise NotADatasetError(f"{path}: trailing bytes after {count} records")

    spec = None
    sidecar = manifest_path(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        except OSError as e:
            raise DatasetFormatError(f"{sidecar}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{sidecar}:{e.lineno}:{e.colno}: {e.msg}") from e
        if not isinstance(meta, dict):
            raise DatasetFormatError(f"{sidecar}: not a dataset sidecar")
        if meta.get("fingerprint") != fingerprint:
            raise FingerprintCorruptionError(f"{path}: header fingerprint does not match {sidecar.name}")
        spec = meta.get("spec")
    return Dataset(fingerprint, n, t, samples, spec=spec)
