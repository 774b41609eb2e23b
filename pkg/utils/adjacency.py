"""
Grid-informed adjacency matrices and the renormalized graph operator
B' = D^-1/2 (B + I) D^-1/2 consumed by the graph-convolution layers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ContractError, ShapeError


class AdjacencyVariant(IntEnum):
    TOPOLOGY = 1      # binary edges plus self-loops
    POWER_FLOW = 2    # K_ij sin(delta*_i - delta*_j) at equilibrium
    CAPACITY = 3      # K_ij on edges, P_i on the diagonal

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).strip().upper()
        roman = {"I": 1, "II": 2, "III": 3}
        try:
            return cls(roman[text] if text in roman else int(text))
        except (KeyError, ValueError):
            raise ContractError(f"unknown adjacency variant {value!r}; use 1, 2 or 3") from None


@dataclass(frozen=True, eq=False)
class GraphOperator:
    raw: np.ndarray
    augmented: np.ndarray
    degrees: np.ndarray
    operator: np.ndarray

    def __post_init__(self):
        for name in ("raw", "augmented", "degrees", "operator"):
            getattr(self, name).setflags(write=False)


def build_adjacency(grid, variant, equilibrium=None):
    variant = AdjacencyVariant.parse(variant)
    n = grid.n_nodes
    i, j = grid.edges[:, 0], grid.edges[:, 1]
    b = np.zeros((n, n))

    if variant is AdjacencyVariant.TOPOLOGY:
        b[i, j] = 1.0
        b[j, i] = 1.0
        np.fill_diagonal(b, 1.0)
    elif variant is AdjacencyVariant.POWER_FLOW:
        if equilibrium is None:
            raise ContractError("the power-flow adjacency needs an equilibrium state")
        if len(equilibrium.delta) != n:
            raise ShapeError(f"equilibrium has {len(equilibrium.delta)} nodes, grid has {n}")
        k = grid.coupling
        b[i, j] = k * np.sin(equilibrium.delta[i] - equilibrium.delta[j])
        b[j, i] = k * np.sin(equilibrium.delta[j] - equilibrium.delta[i])
    else:
        b[i, j] = grid.coupling
        b[j, i] = grid.coupling
        b[np.arange(n), np.arange(n)] = grid.power
    return b


def renormalize(b):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {b.shape}")
    augmented = b + np.eye(len(b))
    degrees = np.abs(augmented).sum(axis=1)
    inv_sqrt = np.zeros_like(degrees)
    positive = degrees > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degrees[positive])
    operator = inv_sqrt[:, None] * augmented * inv_sqrt[None, :]
    return GraphOperator(b.copy(), augmented, degrees, operator)


def grid_operator(grid, variant, equilibrium=None):
    """
    Builds the renormalized operator for a grid. The signed power-flow matrix is
    folded to its elementwise magnitude first so the operator stays symmetric.
    """
    variant = AdjacencyVariant.parse(variant)
    b = build_adjacency(grid, variant, equilibrium)
    if variant is AdjacencyVariant.POWER_FLOW:
        b = np.abs(b)
    return renormalize(b)


def write_matrix_csv(matrix, handle):
    writer = csv.writer(handle)
    for row in np.asarray(matrix):
        writer.writerow([f"{x:.17g}" for x in row])
