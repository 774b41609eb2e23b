"""
Topology-aware temporal-embedding classifier.

Graph-convolution modules mix node features through the fixed operator B',
a linear layer compresses the node embedding, a stack of residual blocks of
causal dilated convolutions reads it as a sequence, and an MLP head turns the
last sequence position into the probability that the trajectory is stable.

Two data-flow readings are supported:

* ``literal``: the whole N x T series enters the first GC module as node
  features, the FC output (64 wide) becomes a 1-channel sequence for the TC stack.
* ``temporal``: GC and FC run per time step with shared weights, the TC stack
  convolves the resulting 64-channel length-T sequence.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .adjacency import AdjacencyVariant, grid_operator
from .errors import (
    ActivationError,
    CheckpointFormatError,
    ChecksumError,
    ContractError,
    FingerprintMismatchError,
    ShapeError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TTNN"
CHECKPOINT_VERSION = 1
MODES = ("literal", "temporal")


@dataclass(frozen=True)
class TTEDNNConfig:
    n_nodes: int
    window: int
    gc_layers: int = 2
    gc_width: int = 16
    fc_width: int = 64
    blocks: int = 5
    kernel: int = 2
    filters: int = 32
    mlp_hidden: int = 32
    variant: int = int(AdjacencyVariant.CAPACITY)
    mode: str = "literal"
    dt: float = 0.0125

    def __post_init__(self):
        widths = ("n_nodes", "window", "gc_layers", "gc_width", "fc_width", "blocks", "kernel", "filters", "mlp_hidden")
        for name in widths:
            if getattr(self, name) < 1:
                raise ContractError(f"model config: {name} must be at least 1, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise ContractError(f"model config: mode must be one of {', '.join(MODES)}, got '{self.mode}'")
        if not self.dt > 0:
            raise ContractError(f"model config: dt must be positive, got {self.dt}")
        object.__setattr__(self, "variant", int(AdjacencyVariant.parse(self.variant)))

    @property
    def dilations(self):
        return tuple(2 ** r for r in range(self.blocks))

    @property
    def receptive_field(self):
        return 1 + 2 * (self.kernel - 1) * (2 ** self.blocks - 1)

    @property
    def gc_input_width(self):
        return self.window if self.mode == "literal" else 1

    @property
    def tc_input_channels(self):
        return 1 if self.mode == "literal" else self.fc_width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def parameter_layout(config):
    """
    Ordered (name, shape, fan_in) for every learnable parameter. fan_in None
    marks a bias/shift (zeros); the ".gamma" scales start at one.
    """
    n, f = config.n_nodes, config.gc_width
    layout = []
    width = config.gc_input_width
    for i in range(config.gc_layers):
        layout += [
            (f"gc.{i}.weight", (width, f), width),
            (f"gc.{i}.bias", (n, f), None),
            (f"gc.{i}.bn.gamma", (n * f,), None),
            (f"gc.{i}.bn.beta", (n * f,), None),
        ]
        width = f
    layout += [
        ("fc.weight", (n * f, config.fc_width), n * f),
        ("fc.bias", (config.fc_width,), None),
    ]
    channels = config.tc_input_channels
    for r in range(config.blocks):
        layout += [
            (f"tc.{r}.conv1", (config.filters, channels, config.kernel), channels * config.kernel),
            (f"tc.{r}.conv2", (config.filters, config.filters, config.kernel), config.filters * config.kernel),
            (f"tc.{r}.ln.gamma", (config.filters,), None),
            (f"tc.{r}.ln.beta", (config.filters,), None),
        ]
        if channels != config.filters:
            layout.append((f"tc.{r}.proj", (config.filters, channels, 1), channels))
        channels = config.filters
    layout += [
        ("mlp.0.weight", (config.filters, config.mlp_hidden), config.filters),
        ("mlp.0.bias", (config.mlp_hidden,), None),
        ("mlp.1.weight", (config.mlp_hidden, 1), config.mlp_hidden),
        ("mlp.1.bias", (1,), None),
    ]
    return layout


def _is_norm(name):
    return ".bn." in name or ".ln." in name


class TTEDNN:
    def __init__(self, config, operator, fingerprint, params, buffers=None):
        self.config = config
        operator = np.array(operator, dtype=np.float64)
        if operator.shape != (config.n_nodes, config.n_nodes):
            raise ShapeError(f"operator shape {operator.shape} does not match N={config.n_nodes}")
        operator.setflags(write=False)
        self.operator = operator
        self.fingerprint = fingerprint
        self.training = False

        expected = {name: shape for name, shape, _ in parameter_layout(config)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
        self.params = {}
        for name, shape in expected.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {value.shape}")
            self.params[name] = T.Tensor(value, requires_grad=True)

        self.bn = {}
        width = config.n_nodes * config.gc_width
        for i in range(config.gc_layers):
            state = T.BatchNormState.fresh(width)
            if buffers:
                state.running_mean = np.array(buffers[f"gc.{i}.bn.running_mean"], dtype=np.float64)
                state.running_var = np.array(buffers[f"gc.{i}.bn.running_var"], dtype=np.float64)
            self.bn[i] = state

    # Mode switches, named after the usual train()/eval() pair
    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def regularized(self):
        """Weights and biases entering the L2 term (normalization scales/shifts excluded)."""
        return [t for name, t in self.params.items() if not _is_norm(name)]

    def buffers(self):
        out = {}
        for i, state in self.bn.items():
            out[f"gc.{i}.bn.running_mean"] = state.running_mean
            out[f"gc.{i}.bn.running_var"] = state.running_var
        return out

    def state_dict(self):
        """Copies of every array a checkpoint stores."""
        state = {name: t.data.copy() for name, t in self.params.items()}
        state.update({name: value.copy() for name, value in self.buffers().items()})
        state["operator"] = self.operator.copy()
        return state

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    @staticmethod
    def _checked(out, layer):
        if not np.all(np.isfinite(out.data)):
            raise ActivationError(layer)
        return out

    def gc_forward(self, h, i):
        """One GC module: relu(BN(B' H W + b)) on a (batch, N, C) input."""
        h = T.as_tensor(h)
        p = self.params
        n, f = self.config.n_nodes, self.config.gc_width
        weight = p[f"gc.{i}.weight"]
        if h.ndim != 3 or h.shape[1] != n or h.shape[2] != weight.shape[0]:
            raise ShapeError(f"gc.{i}: expected input (batch, {n}, {weight.shape[0]}), got {h.shape}")
        mixed = T.matmul(T.Tensor(self.operator), h)
        z = T.add(T.matmul(mixed, weight), p[f"gc.{i}.bias"])
        z = T.reshape(z, (h.shape[0], n * f))
        z = T.batch_norm(z, p[f"gc.{i}.bn.gamma"], p[f"gc.{i}.bn.beta"], self.bn[i], self.training)
        z = T.relu(T.reshape(z, (h.shape[0], n, f)))
        return self._checked(z, f"gc.{i}")

    def tc_block(self, x, r):
        """Residual block: relu(res(x) + LN(conv(conv(x)))) on a (batch, C, L) input."""
        x = T.as_tensor(x)
        p = self.params
        d = self.config.dilations[r]
        conv1 = p[f"tc.{r}.conv1"]
        if x.ndim != 3 or x.shape[1] != conv1.shape[1]:
            raise ShapeError(f"tc.{r}: expected input (batch, {conv1.shape[1]}, L), got {x.shape}")
        y = T.causal_dilated_conv1d(x, conv1, d)
        y = T.causal_dilated_conv1d(y, p[f"tc.{r}.conv2"], d)
        # layer norm over channels at each position keeps the block causal
        y = T.transpose(y, (0, 2, 1))
        y = T.layer_norm(y, p[f"tc.{r}.ln.gamma"], p[f"tc.{r}.ln.beta"])
        y = T.transpose(y, (0, 2, 1))
        residual = x
        if f"tc.{r}.proj" in p:
            residual = T.causal_dilated_conv1d(x, p[f"tc.{r}.proj"], 1)
        return self._checked(T.relu(T.add(residual, y)), f"tc.{r}")

    def tc_stack(self, x):
        for r in range(self.config.blocks):
            x = self.tc_block(x, r)
        return x

    def embed(self, x):
        """Runs everything up to the TC stack; returns the (batch, C, L) sequence it consumes."""
        cfg = self.config
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.n_nodes, cfg.window):
            raise ShapeError(f"expected input (batch, {cfg.n_nodes}, {cfg.window}), got {x.shape}")
        batch = x.shape[0]
        p = self.params
        if cfg.mode == "literal":
            h = x
        else:
            h = T.reshape(T.transpose(x, (0, 2, 1)), (batch * cfg.window, cfg.n_nodes, 1))
        for i in range(cfg.gc_layers):
            h = self.gc_forward(h, i)
        z = self._checked(T.dense(T.flatten(h), p["fc.weight"], p["fc.bias"]), "fc")
        if cfg.mode == "literal":
            return T.reshape(z, (batch, 1, cfg.fc_width))
        return T.transpose(T.reshape(z, (batch, cfg.window, cfg.fc_width)), (0, 2, 1))

    def logits(self, x):
        p = self.params
        seq = self.tc_stack(self.embed(x))
        hidden = T.relu(T.dense(T.take_last(seq), p["mlp.0.weight"], p["mlp.0.bias"]))
        out = T.dense(hidden, p["mlp.1.weight"], p["mlp.1.bias"])
        out = self._checked(out, "mlp")
        return T.reshape(out, (out.shape[0],))

    def forward(self, x):
        """Probabilities p in (0, 1) that each (N, T) input is stable."""
        return T.sigmoid(self.logits(x))

    __call__ = forward

    def predict_proba(self, x, batch_size=1024):
        """Inference-mode probabilities for a (S, N, T) numpy array."""
        was_training = self.training
        self.eval()
        x = np.asarray(x, dtype=np.float64)
        out = []
        try:
            with T.no_grad():
                for k in range(0, len(x), batch_size):
                    out.append(self.forward(x[k:k + batch_size]).data)
        finally:
            self.training = was_training
        return np.concatenate(out) if out else np.zeros(0)


def init_parameters(config, rng, operator, fingerprint=""):
    """Fan-in uniform weights in +-sqrt(6/fan_in), zero biases and shifts, unit scales."""
    params = {}
    for name, shape, fan_in in parameter_layout(config):
        if fan_in is not None:
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return TTEDNN(config, operator, fingerprint, params)


def build_model(grid, config, seed=0, equilibrium=None):
    if config.n_nodes != grid.n_nodes:
        raise ShapeError(f"model is configured for N={config.n_nodes}, grid '{grid.name}' has N={grid.n_nodes}")
    op = grid_operator(grid, config.variant, equilibrium).operator
    model = init_parameters(config, np.random.default_rng(seed), op, grid.fingerprint)
    logger.info("Built %s-mode model with %d parameters (adjacency variant %d)",
                config.mode, sum(t.size for t in model.parameters()), config.variant)
    return model


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    blobs = model.state_dict()

    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<HI", CHECKPOINT_VERSION, len(config_json))
    body += config_json
    body += bytes.fromhex(model.fingerprint) if model.fingerprint else bytes(32)
    body += struct.pack("<I", len(blobs))
    for name, value in blobs.items():
        encoded = name.encode("utf-8")
        body += struct.pack("<HB", len(encoded), value.ndim)
        body += encoded
        body += struct.pack(f"<{value.ndim}I", *value.shape)
        body += np.ascontiguousarray(value, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    path.write_bytes(bytes(body))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, size):
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"{self.path}: checkpoint ends early")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, grid=None):
    """
    Reads a checkpoint; with ``grid`` given, its fingerprint must match the one
    the model was trained on.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"{path}: {e.strerror or e}") from e
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    if len(data) < 4 + 6 + 32 + 4 + 4:
        raise CheckpointFormatError(f"{path}: checkpoint ends early")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")

    reader = _Reader(data[:-4], path)
    reader.take(4)
    version, config_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: checkpoint version {version} is not supported")
    try:
        config = TTEDNNConfig.from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block ({exc})") from exc
    raw_fp = reader.take(32)
    fingerprint = raw_fp.hex() if any(raw_fp) else ""
    (count,) = reader.unpack("<I")
    blobs = {}
    for _ in range(count):
        name_len, ndim = reader.unpack("<HB")
        name = reader.take(name_len).decode("utf-8")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)

    if grid is not None and grid.fingerprint != fingerprint:
        raise FingerprintMismatchError(
            f"checkpoint was trained on grid {fingerprint[:12]}, got '{grid.name}' ({grid.fingerprint[:12]})")
    operator = blobs.pop("operator", None)
    if operator is None:
        raise CheckpointFormatError(f"{path}: checkpoint has no graph operator")
    buffers = {name: blobs.pop(name) for name in list(blobs) if ".running_" in name}
    return TTEDNN(config, operator, fingerprint, blobs, buffers)
