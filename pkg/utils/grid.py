"""
Power network model for the networked swing equation.

A grid is stored in normalized form: per-node damping ``alpha`` (1/s), power
injection ``power`` (1/s^2), an unordered edge list with symmetric line
capacity, and a per-node divisor ``scale = 1/(I_i * omega_syn)``. The row-scaled
coupling K_ij = capacity_ij * scale_i is what the dynamics use; the symmetric
capacity is what the adjacency builders use.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import GridParseError, GridValidationError, ParameterError, TopologyError

logger = logging.getLogger(__name__)

GRID_FORMAT_VERSION = 1
POWER_BALANCE_TOL = 1e-9
CONSISTENCY_RTOL = 1e-12


def _frozen(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RawMachineParams:
    """Unnormalized machine and line data (inertia, damping, mechanical power, line limits)."""
    inertia: np.ndarray
    damping: np.ndarray
    p_mech: np.ndarray
    omega_syn: float
    p_max: dict | None = None
    voltage: np.ndarray | None = None
    susceptance: dict | None = None

    def __post_init__(self):
        for name in ("inertia", "damping", "p_mech", "voltage"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))

    @property
    def n_nodes(self):
        return len(self.inertia)

    def violations(self):
        problems = []
        n = self.n_nodes
        if len(self.damping) != n or len(self.p_mech) != n:
            problems.append("inertia, damping and p_mech must have the same length")
            return problems
        if not np.isfinite(self.omega_syn) or self.omega_syn <= 0:
            problems.append(f"nonpositive omega_syn {self.omega_syn}")
        for i in range(n):
            if not self.inertia[i] > 0:
                problems.append(f"nonpositive inertia at node {i}")
            if not self.damping[i] > 0:
                problems.append(f"nonpositive damping at node {i}")
            if not np.isfinite(self.p_mech[i]):
                problems.append(f"non-finite p_mech at node {i}")
        if self.p_max:
            for (i, j), value in self.p_max.items():
                if value < 0:
                    problems.append(f"negative p_max on edge ({i}, {j})")
                other = self.p_max.get((j, i))
                if other is not None and other != value:
                    problems.append(f"asymmetric p_max on edge ({i}, {j})")
        return problems

    def edge_capacity(self, edges):
        """
        P^MAX for each edge, taken from ``p_max`` or derived as |V_i||V_j| Im(Y_ij).
        """
        capacity = np.empty(len(edges))
        for e, (i, j) in enumerate(edges):
            if self.p_max is not None and (i, j) in self.p_max:
                capacity[e] = self.p_max[(i, j)]
            elif self.p_max is not None and (j, i) in self.p_max:
                capacity[e] = self.p_max[(j, i)]
            elif self.voltage is not None and self.susceptance is not None:
                y = self.susceptance.get((i, j), self.susceptance.get((j, i)))
                if y is None:
                    raise ParameterError(f"no susceptance for edge ({i}, {j})")
                capacity[e] = abs(self.voltage[i]) * abs(self.voltage[j]) * abs(np.imag(y) if np.iscomplexobj(y) else y)
            else:
                raise ParameterError(f"no p_max for edge ({i}, {j})")
        return capacity


@dataclass(frozen=True, eq=False)
class PowerGrid:
    alpha: np.ndarray
    power: np.ndarray
    edges: np.ndarray
    capacity: np.ndarray
    scale: np.ndarray | None = None
    name: str = ""
    labels: tuple = ()
    omega_syn: float | None = None
    inertia: np.ndarray | None = None
    damping: np.ndarray | None = None
    p_mech: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "power", _frozen(self.power))
        edges = _frozen(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "capacity", _frozen(self.capacity))
        scale = np.ones(len(self.alpha)) if self.scale is None else self.scale
        object.__setattr__(self, "scale", _frozen(scale))
        for name in ("inertia", "damping", "p_mech"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))
        labels = tuple(self.labels) if self.labels else tuple(str(i) for i in range(len(self.alpha)))
        object.__setattr__(self, "labels", labels)

        imbalance = self.power_imbalance
        if abs(imbalance) > POWER_BALANCE_TOL:
            logger.warning("Grid '%s' is not power balanced (sum P_m = %.3e); "
                           "equilibria are solved in a rotating frame", self.name, imbalance)

    @property
    def n_nodes(self):
        return len(self.alpha)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def power_imbalance(self):
        """Net mechanical power sum P_i / scale_i; zero means the synchronous frame does not rotate."""
        return float(np.sum(self.power / self.scale))

    @property
    def weighted_power_sum(self):
        """Sum of P_i / alpha_i."""
        return float(np.sum(self.power / self.alpha))

    @cached_property
    def coupling(self):
        """Symmetric per-edge coupling: capacity over the geometric mean of the two node divisors."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        return _frozen(self.capacity * np.sqrt(self.scale[i] * self.scale[j]))

    def coupling_matrix(self):
        """Row-scaled K with K[i, j] = capacity_ij * scale_i (asymmetric when inertias differ)."""
        k = np.zeros((self.n_nodes, self.n_nodes))
        for (i, j), cap in zip(self.edges, self.capacity):
            k[i, j] = cap * self.scale[i]
            k[j, i] = cap * self.scale[j]
        return k

    def symmetric_coupling_matrix(self):
        k = np.zeros((self.n_nodes, self.n_nodes))
        for (i, j), value in zip(self.edges, self.coupling):
            k[i, j] = value
            k[j, i] = value
        return k

    def node_kinds(self):
        return ["generator" if p > 0 else "load" for p in self.power]

    @cached_property
    def incidence(self):
        """
        Padded per-node gather tables for the coupling sum.

        For node i, ``index[i, k]`` is an incident edge e=(a, b) and ``coef[i, k]``
        multiplies sin(delta_b - delta_a): +capacity*scale_a for a, -capacity*scale_b for b.
        Padding slots have coefficient 0.
        """
        per_node = [[] for _ in range(self.n_nodes)]
        for e, ((a, b), cap) in enumerate(zip(self.edges, self.capacity)):
            per_node[a].append((e, cap * self.scale[a]))
            per_node[b].append((e, -cap * self.scale[b]))
        width = max((len(entries) for entries in per_node), default=0)
        index = np.zeros((self.n_nodes, width), dtype=np.int64)
        coef = np.zeros((self.n_nodes, width))
        for i, entries in enumerate(per_node):
            for k, (e, c) in enumerate(entries):
                index[i, k] = e
                coef[i, k] = c
        index.setflags(write=False)
        coef.setflags(write=False)
        return index, coef

    @cached_property
    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_edges_from((int(i), int(j)) for i, j in self.edges)
        return g

    @cached_property
    def fingerprint(self):
        """SHA-256 hex digest of the canonical serialization."""
        canonical = json.dumps(grid_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def fingerprint_bytes(self):
        return bytes.fromhex(self.fingerprint)


def validate(grid):
    """
    Lists everything wrong with a grid. An empty list means the grid is valid.
    """
    problems = []
    n = grid.n_nodes
    if len(grid.power) != n or len(grid.scale) != n or len(grid.labels) != n:
        problems.append("node arrays have inconsistent lengths")
        return problems
    if len(grid.capacity) != grid.n_edges:
        problems.append("edge capacity count does not match edge count")
        return problems

    for i in range(n):
        if not (np.isfinite(grid.alpha[i]) and grid.alpha[i] > 0):
            problems.append(f"nonpositive damping at node {i}")
        if not np.isfinite(grid.power[i]):
            problems.append(f"non-finite power at node {i}")
        if not (np.isfinite(grid.scale[i]) and grid.scale[i] > 0):
            problems.append(f"nonpositive inertia divisor at node {i}")

    seen = {}
    in_range = []
    for e, ((i, j), cap) in enumerate(zip(grid.edges, grid.capacity)):
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            problems.append(f"edge {e} references unknown node ({i}, {j})")
            continue
        if i == j:
            problems.append(f"self edge at node {i}")
            continue
        if not (np.isfinite(cap) and cap > 0):
            problems.append(f"nonpositive coupling on edge ({i}, {j})")
        key = (min(i, j), max(i, j))
        if key in seen:
            problems.append(f"duplicate edge {key}")
            if seen[key] != cap:
                problems.append(f"asymmetric coupling on edge {key}")
        else:
            seen[key] = cap
        in_range.append(key)

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(in_range)
    if n > 0 and not nx.is_connected(g):
        reachable = nx.node_connected_component(g, 0)
        problems.extend(f"node {i} unreachable" for i in range(n) if i not in reachable)

    # Raw fields must agree with the normalized ones they produced
    if grid.omega_syn is not None and grid.inertia is not None:
        divisor = grid.inertia * grid.omega_syn
        if not np.allclose(grid.scale, 1.0 / divisor, rtol=CONSISTENCY_RTOL, atol=0):
            problems.append("scale inconsistent with inertia and omega_syn")
        if grid.damping is not None:
            for i in np.flatnonzero(~np.isclose(grid.alpha, grid.damping / divisor, rtol=CONSISTENCY_RTOL, atol=0)):
                problems.append(f"alpha inconsistent with damping at node {i}")
        if grid.p_mech is not None:
            for i in np.flatnonzero(~np.isclose(grid.power, grid.p_mech / divisor, rtol=CONSISTENCY_RTOL, atol=1e-15)):
                problems.append(f"power inconsistent with p_mech at node {i}")
    return problems


def _raise_for(problems, prefix=""):
    if not problems:
        return
    message = prefix + "; ".join(problems)
    if any("unreachable" in p for p in problems):
        raise TopologyError(message, problems)
    raise GridValidationError(message, problems)


def normalize_parameters(raw, topology, name="", labels=None):
    """
    Converts raw machine data into a PowerGrid:
    alpha = D/(I w_syn), P = P_m/(I w_syn), K_ij = P^MAX_ij/(I_i w_syn).
    """
    problems = raw.violations()
    if problems:
        raise ParameterError("; ".join(problems), problems)

    edges = np.array([(int(i), int(j)) for i, j in topology], dtype=np.int64).reshape(-1, 2)
    capacity = raw.edge_capacity(edges)
    divisor = raw.inertia * raw.omega_syn
    grid = PowerGrid(
        alpha=raw.damping / divisor,
        power=raw.p_mech / divisor,
        edges=edges,
        capacity=capacity,
        scale=1.0 / divisor,
        name=name,
        labels=tuple(labels or ()),
        omega_syn=float(raw.omega_syn),
        inertia=raw.inertia,
        damping=raw.damping,
        p_mech=raw.p_mech,
    )
    _raise_for(validate(grid))
    return grid


def grid_to_dict(grid):
    raw_edges = grid.inertia is not None and grid.omega_syn is not None
    nodes = []
    for i in range(grid.n_nodes):
        node = {"id": i, "label": grid.labels[i], "alpha": float(grid.alpha[i]), "power": float(grid.power[i])}
        if grid.inertia is not None:
            node["inertia"] = float(grid.inertia[i])
        if grid.damping is not None:
            node["damping"] = float(grid.damping[i])
        if grid.p_mech is not None:
            node["p_mech"] = float(grid.p_mech[i])
        nodes.append(node)
    edges = []
    for (i, j), cap in zip(grid.edges, grid.capacity):
        key = "p_max" if raw_edges else "k"
        edges.append({"from": int(i), "to": int(j), key: float(cap)})
    doc = {"version": GRID_FORMAT_VERSION, "name": grid.name}
    if grid.omega_syn is not None:
        doc["omega_syn"] = float(grid.omega_syn)
    doc["nodes"] = nodes
    doc["edges"] = edges
    return doc


def _number(obj, key, where, source, required=True):
    if key not in obj:
        if required:
            raise GridParseError(f"{source}: {where}: missing field '{key}'")
        return None
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GridParseError(f"{source}: {where}: field '{key}' must be a number, got {value!r}")
    return float(value)


def _normalized_fields(alpha, power, raw, omega_syn, source):
    # alpha and power may be left out when the raw machine data can produce them
    fields = {"alpha": alpha, "power": power}
    needs = {"alpha": "damping", "power": "p_mech"}
    for key, values in fields.items():
        given = [v is not None for v in values]
        if all(given):
            continue
        if any(given):
            missing = given.index(False)
            raise GridParseError(f"{source}: nodes[{missing}]: field '{key}' is set on some nodes but not all")
        if omega_syn is None or "inertia" not in raw or needs[key] not in raw:
            raise GridParseError(f"{source}: nodes[0]: missing field '{key}' "
                                 f"(or 'omega_syn' with per-node 'inertia' and '{needs[key]}')")
        fields[key] = raw[needs[key]] / (raw["inertia"] * omega_syn)
    return fields["alpha"], fields["power"]


def grid_from_dict(doc, source="<grid>"):
    if not isinstance(doc, dict):
        raise GridParseError(f"{source}: top level must be an object")
    version = doc.get("version")
    if version != GRID_FORMAT_VERSION:
        raise GridParseError(f"{source}: unsupported grid format version {version!r}")
    nodes = doc.get("nodes")
    edges = doc.get("edges")
    if not isinstance(nodes, list) or not nodes:
        raise GridParseError(f"{source}: field 'nodes' must be a non-empty array")
    if not isinstance(edges, list):
        raise GridParseError(f"{source}: field 'edges' must be an array")
    omega_syn = _number(doc, "omega_syn", "document", source, required=False)

    ids, alpha, power, labels = [], [], [], []
    raw = {"inertia": [], "damping": [], "p_mech": []}
    for k, node in enumerate(nodes):
        where = f"nodes[{k}]"
        if not isinstance(node, dict):
            raise GridParseError(f"{source}: {where}: must be an object")
        node_id = node.get("id")
        if isinstance(node_id, bool) or not isinstance(node_id, int):
            raise GridParseError(f"{source}: {where}: field 'id' must be an integer")
        ids.append(node_id)
        alpha.append(_number(node, "alpha", where, source, required=False))
        power.append(_number(node, "power", where, source, required=False))
        labels.append(str(node.get("label", node_id)))
        for key in raw:
            raw[key].append(_number(node, key, where, source, required=False))
    if ids != list(range(len(nodes))):
        raise GridParseError(f"{source}: node ids must be consecutive integers starting at 0")

    optional = {}
    for key, values in raw.items():
        present = [v is not None for v in values]
        if all(present):
            optional[key] = np.array(values)
        elif any(present):
            missing = present.index(False)
            raise GridParseError(f"{source}: nodes[{missing}]: field '{key}' is set on some nodes but not all")

    alpha, power = _normalized_fields(alpha, power, optional, omega_syn, source)

    pairs, capacity, kinds = [], [], set()
    for k, edge in enumerate(edges):
        where = f"edges[{k}]"
        if not isinstance(edge, dict):
            raise GridParseError(f"{source}: {where}: must be an object")
        ends = []
        for key in ("from", "to"):
            value = edge.get(key)
            if isinstance(value, bool) or not isinstance(value, int):
                raise GridParseError(f"{source}: {where}: field '{key}' must be an integer")
            ends.append(value)
        if "k" in edge:
            kinds.add("k")
            capacity.append(_number(edge, "k", where, source))
        elif "p_max" in edge:
            kinds.add("p_max")
            capacity.append(_number(edge, "p_max", where, source))
        else:
            raise GridParseError(f"{source}: {where}: missing field 'k' or 'p_max'")
        pairs.append(ends)
    if len(kinds) > 1:
        raise GridParseError(f"{source}: edges mix 'k' and 'p_max'")

    scale = None
    if "p_max" in kinds:
        if omega_syn is None or "inertia" not in optional:
            raise GridParseError(f"{source}: 'p_max' edges need 'omega_syn' and per-node 'inertia'")
        scale = 1.0 / (optional["inertia"] * omega_syn)

    return PowerGrid(
        alpha=alpha,
        power=power,
        edges=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        capacity=capacity,
        scale=scale,
        name=str(doc.get("name", "")),
        labels=tuple(labels),
        omega_syn=omega_syn,
        inertia=optional.get("inertia"),
        damping=optional.get("damping"),
        p_mech=optional.get("p_mech"),
    )


def load_grid(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise GridParseError(f"{path}: {e.strerror or e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GridParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e

    grid = grid_from_dict(doc, source=str(path))
    _raise_for(validate(grid), prefix=f"{path}: ")
    logger.debug("Loaded grid '%s' (N=%d, E=%d) from %s", grid.name, grid.n_nodes, grid.n_edges, path)
    return grid


def save_grid(grid, path):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(grid_to_dict(grid), indent=2) + "\n", encoding="utf-8")
