import math

import numpy as np
import pytest

from utils.cases import MachineDefaults, build_case_grid, case_grid
from utils.dynamics import edge_gaps, find_equilibrium
from utils.errors import InputError
from utils.grid import grid_to_dict, grid_from_dict, validate


def test_build_case_grid_normalizes_synthetic_machines():
    grid = build_case_grid("tri", [1.0, -0.5, -0.5], [True, False, False],
                           [(0, 1, 0.1), (1, 0, 0.1), (1, 2, 0.2), (2, 2, 0.3)])
    assert (grid.n_nodes, grid.n_edges) == (3, 2)
    np.testing.assert_allclose(grid.alpha, 0.3)
    np.testing.assert_allclose(grid.scale, [0.4, 1.0, 1.0])
    np.testing.assert_allclose(grid.power, [0.4, -0.5, -0.5])
    k = grid.coupling_matrix()
    # parallel branches add their limits
    assert k[0, 1] == pytest.approx(20.0 * 0.4)
    assert k[1, 0] == pytest.approx(20.0)
    assert k[1, 2] == pytest.approx(5.0)
    assert grid.omega_syn == pytest.approx(2 * math.pi * 60)
    assert validate(grid) == []


def test_build_case_grid_absorbs_rounding_imbalance():
    grid = build_case_grid("pair", [1.0, -1.0 + 1e-9], [True, False], [(0, 1, 0.5)])
    assert abs(grid.power_imbalance) < 1e-12


def test_build_case_grid_rejects_bad_reactance():
    with pytest.raises(InputError, match="nonpositive reactance"):
        build_case_grid("bad", [0.5, -0.5], [True, False], [(0, 1, 0.0)])


def test_case_grid_survives_a_file_roundtrip():
    grid = build_case_grid("tri", [1.0, -0.5, -0.5], [True, False, False], [(0, 1, 0.1), (1, 2, 0.2)],
                           MachineDefaults(gen_inertia=4.0, alpha=0.2, frequency=50.0))
    again = grid_from_dict(grid_to_dict(grid))
    assert again.fingerprint == grid.fingerprint


def test_unknown_case_is_an_input_error():
    with pytest.raises(InputError, match="unknown case"):
        case_grid("case9999")


def test_ieee118_converts_and_synchronizes(ieee118):
    assert (ieee118.n_nodes, ieee118.labels[0]) == (118, "bus1")
    assert validate(ieee118) == []
    assert abs(ieee118.power_imbalance) < 1e-9
    eq = find_equilibrium(ieee118)
    assert edge_gaps(ieee118, eq.delta) < math.pi / 2
    np.testing.assert_allclose(eq.omega, 0.0, atol=1e-9)


def test_case39_matches_the_shipped_topology(ieee39):
    pytest.importorskip("pandapower")
    grid = case_grid("case39")
    assert (grid.n_nodes, grid.n_edges) == (ieee39.n_nodes, ieee39.n_edges)
    assert {tuple(sorted(e)) for e in grid.edges.tolist()} == {tuple(sorted(e)) for e in ieee39.edges.tolist()}


def test_import_case_command(cli, tmp_path, capsys):
    pytest.importorskip("pandapower")
    out = tmp_path / "grids" / "ieee118.grid"
    assert cli(["import-case", "case118", "--out", str(out)]) == 0
    assert "N=118" in capsys.readouterr().out
    assert cli(["gridinfo", str(out)]) == 0
    assert "Validation: ok" in capsys.readouterr().out
