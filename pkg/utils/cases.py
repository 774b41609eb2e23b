"""
Standard test cases converted to grids.

A case is reduced to what the swing model needs: the net active injection of
every bus from a DC power flow and one line limit P^MAX = 1/x per connected bus
pair. Machine data is synthetic. Generator buses get ``gen_inertia`` and the
other buses ``load_inertia`` (both in units of 1/omega_syn), and every bus gets
the same alpha. The raw values go through normalize_parameters like any other
raw grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EquilibriumNotFoundError, InputError
from .grid import RawMachineParams, normalize_parameters

logger = logging.getLogger(__name__)

CASES = ("case39", "case118")
BALANCE_SLACK = 1e-6


@dataclass(frozen=True)
class MachineDefaults:
    gen_inertia: float = 2.5
    load_inertia: float = 1.0
    alpha: float = 0.3
    frequency: float = 60.0

    @property
    def omega_syn(self):
        return 2.0 * math.pi * self.frequency


def build_case_grid(name, injection, generators, branches, defaults=None, labels=None):
    """
    Builds a raw grid from per-bus injections (p.u.), a generator mask and
    (from, to, x) branch rows in p.u. Parallel branches between one bus pair
    add their limits.
    """
    defaults = defaults or MachineDefaults()
    injection = np.asarray(injection, dtype=np.float64)
    generators = np.asarray(generators, dtype=bool)
    n = len(injection)

    limits = {}
    for i, j, x in branches:
        i, j = int(i), int(j)
        if i == j:
            continue
        if not x > 0:
            raise InputError(f"{name}: branch ({i}, {j}) has nonpositive reactance {x}")
        key = (min(i, j), max(i, j))
        limits[key] = limits.get(key, 0.0) + 1.0 / x

    imbalance = float(injection.sum())
    if abs(imbalance) <= BALANCE_SLACK:
        injection = injection - imbalance / n
    else:
        logger.warning("%s: injections sum to %.3e p.u.; the grid will settle in a rotating frame", name, imbalance)

    omega_syn = defaults.omega_syn
    weight = np.where(generators, defaults.gen_inertia, defaults.load_inertia)
    raw = RawMachineParams(
        inertia=weight / omega_syn,
        damping=defaults.alpha * weight,
        p_mech=injection,
        omega_syn=omega_syn,
        p_max=limits,
    )
    topology = sorted(limits)
    grid = normalize_parameters(raw, topology, name=name, labels=labels or [f"bus{k + 1}" for k in range(n)])
    logger.info("Converted %s: N=%d E=%d, %d generator bus(es)", name, grid.n_nodes, grid.n_edges,
                int(generators.sum()))
    return grid


def _pandapower():
    try:
        import pandapower
        import pandapower.networks
    except ImportError as e:
        raise InputError("converting test cases needs pandapower (pip install pandapower)") from e
    return pandapower


def case_grid(case, defaults=None):
    """Loads a pandapower test case by name and converts it."""
    if case not in CASES:
        raise InputError(f"unknown case '{case}' (known: {', '.join(CASES)})")
    pp = _pandapower()
    net = getattr(pp.networks, case)()
    return net_to_grid(net, case, defaults)


def net_to_grid(net, name, defaults=None):
    pp = _pandapower()
    try:
        pp.rundcpp(net)
    except Exception as e:
        raise EquilibriumNotFoundError(f"{name}: DC power flow failed: {e}") from e

    buses = [int(b) for b in net.bus.index[net.bus["in_service"]]]
    position = {bus: k for k, bus in enumerate(buses)}
    # res_bus uses the load sign convention
    injection = -net.res_bus.loc[buses, "p_mw"].to_numpy(dtype=np.float64) / net.sn_mva

    generators = np.zeros(len(buses), dtype=bool)
    for table in (net.gen, net.ext_grid, net.sgen):
        for bus in table.loc[table["in_service"], "bus"].astype(int):
            if bus in position:
                generators[position[bus]] = True

    branches = []
    lines = net.line[net.line["in_service"]]
    base = net.bus.loc[lines["from_bus"], "vn_kv"].to_numpy(dtype=np.float64) ** 2 / net.sn_mva
    x = (lines["x_ohm_per_km"] * lines["length_km"] / lines["parallel"]).to_numpy(dtype=np.float64) / base
    branches += zip(lines["from_bus"].astype(int), lines["to_bus"].astype(int), x)

    trafos = net.trafo[net.trafo["in_service"]]
    vk = trafos["vk_percent"].to_numpy(dtype=np.float64)
    vkr = trafos["vkr_percent"].to_numpy(dtype=np.float64)
    x = (np.sqrt(np.maximum(vk ** 2 - vkr ** 2, 0.0)) / 100.0 * net.sn_mva
         / trafos["sn_mva"].to_numpy(dtype=np.float64) / trafos["parallel"].to_numpy(dtype=np.float64))
    branches += zip(trafos["hv_bus"].astype(int), trafos["lv_bus"].astype(int), x)

    for table in ("impedance", "trafo3w", "dcline"):
        if table in net and len(net[table]):
            logger.warning("%s: ignoring %d %s element(s)", name, len(net[table]), table)

    rows = [(position[i], position[j], x) for i, j, x in branches if i in position and j in position]
    labels = [f"bus{bus + 1}" for bus in buses]
    return build_case_grid(name, injection, generators, rows, defaults, labels)
