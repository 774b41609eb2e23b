import hashlib

import numpy as np
import pytest

from utils.dynamics import StabilitySettings, find_equilibrium
from utils.errors import (
    ContractError,
    DatasetFormatError,
    DatasetVersionError,
    FingerprintCorruptionError,
    FingerprintMismatchError,
    NotADatasetError,
    TruncatedRecordError,
)
from utils.sampling import (
    Dataset,
    PerturbationSpec,
    Sample,
    choose_combinations,
    generate_dataset,
    load_dataset,
    load_split_index,
    manifest_path,
    sample_initial_state,
    save_dataset,
    save_split_index,
    split_dataset,
)

SHORT = StabilitySettings(t_label=2.0, window=0.5)


def sha256(path):
    with open(path, "rb") as handle:
        return hashlib.sha256(handle.read()).hexdigest()


def test_initial_state_kicks_only_chosen_nodes(ring10):
    eq = find_equilibrium(ring10)
    state = sample_initial_state(ring10, eq, [2, 5], np.random.default_rng(0))
    changed = np.flatnonzero(state.omega != eq.omega)
    np.testing.assert_array_equal(changed, [2, 5])
    assert np.all(np.abs(state.omega - eq.omega) <= 20.0)
    np.testing.assert_array_equal(state.delta, eq.delta)


def test_initial_state_can_kick_phases(ring10):
    eq = find_equilibrium(ring10)
    state = sample_initial_state(ring10, eq, [3], np.random.default_rng(1), perturb_delta=True)
    moved = np.flatnonzero(state.delta != eq.delta)
    np.testing.assert_array_equal(moved, [3])
    assert abs(state.delta[3] - eq.delta[3]) <= np.pi


@pytest.mark.parametrize("nodes", [[], [0, 0], [10]])
def test_initial_state_rejects_bad_node_sets(ring10, nodes):
    eq = find_equilibrium(ring10)
    with pytest.raises(ContractError):
        sample_initial_state(ring10, eq, nodes, np.random.default_rng(0))


def test_choose_combinations_are_distinct():
    combos = choose_combinations(39, 3, 5, np.random.default_rng(0))
    assert len(combos) == 5
    assert len(set(combos)) == 5
    for combo in combos:
        assert len(set(combo)) == 3
        assert list(combo) == sorted(combo)


def test_choose_combinations_exhausts_small_pools():
    combos = choose_combinations(4, 2, 6, np.random.default_rng(0))
    assert sorted(combos) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    with pytest.raises(ContractError):
        choose_combinations(4, 2, 7, np.random.default_rng(0))


def test_spec_validation(ring10):
    with pytest.raises(ContractError):
        PerturbationSpec(mode="multi", m=10).validate(ring10.n_nodes)
    with pytest.raises(ContractError):
        PerturbationSpec(window=5000).validate(ring10.n_nodes)
    with pytest.raises(ContractError):
        PerturbationSpec(mode="pairs").validate(ring10.n_nodes)


def test_single_mode_count_on_two_nodes(two_node):
    spec = PerturbationSpec(per_node=1, window=11, stability=SHORT)
    dataset = generate_dataset(two_node, spec)
    assert len(dataset) == 2
    assert [s.nodes for s in dataset.samples] == [(0,), (1,)]
    x, y = dataset.arrays()
    assert x.shape == (2, 2, 11)
    assert set(y.tolist()) <= {0, 1}


def test_ieee39_counts(ieee39):
    single = PerturbationSpec(per_node=10, window=21, stability=SHORT)
    assert single.expected_count(39) == 390
    assert len(generate_dataset(ieee39, single)) == 390

    multi = PerturbationSpec(mode="multi", m=3, combos=5, per_combo=10, window=21, stability=SHORT)
    dataset = generate_dataset(ieee39, multi)
    assert len(dataset) == 50
    assert all(len(s.nodes) == 3 for s in dataset.samples)
    assert len({s.nodes for s in dataset.samples}) == 5


def test_ieee39_full_horizon_yields_both_classes(ieee39):
    dataset = generate_dataset(ieee39, PerturbationSpec(per_node=20))
    counts = dataset.class_counts
    assert counts["unstable"] > 0
    assert counts["stable"] > counts["unstable"]
    # forward kicks on the heavily loaded generators are what slip
    unstable_nodes = {s.nodes[0] for s in dataset.samples if s.label == 0}
    assert unstable_nodes & set(range(29, 39))


def test_first_column_is_the_kicked_state(ring10):
    eq = find_equilibrium(ring10)
    spec = PerturbationSpec(per_node=2, window=5, seed=4, stability=SHORT)
    dataset = generate_dataset(ring10, spec, eq)
    for sample in dataset.samples:
        kicked = sample.omega[:, 0] - eq.omega
        np.testing.assert_array_equal(np.flatnonzero(kicked), list(sample.nodes))
        assert np.all(np.abs(sample.kicks - eq.omega[list(sample.nodes)]) <= 20.0)


def test_sample_replays_from_its_seed(ring10):
    eq = find_equilibrium(ring10)
    spec = PerturbationSpec(per_node=3, window=5, seed=9, stability=SHORT)
    dataset = generate_dataset(ring10, spec, eq)
    sample = dataset.samples[7]
    state = sample_initial_state(ring10, eq, sample.nodes, np.random.default_rng(sample.seed))
    np.testing.assert_array_equal(state.omega, sample.omega[:, 0])


def test_generation_is_independent_of_workers(ring10):
    spec = PerturbationSpec(per_node=60, window=5, seed=2, stability=SHORT)
    one = generate_dataset(ring10, spec, workers=1)
    two = generate_dataset(ring10, spec, workers=2)
    x1, y1 = one.arrays()
    x2, y2 = two.arrays()
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(y1, y2)


def test_regeneration_is_byte_identical(tmp_path, two_node):
    spec = PerturbationSpec(per_node=5, window=11, seed=7, stability=SHORT)
    save_dataset(generate_dataset(two_node, spec), tmp_path / "a.ttds")
    save_dataset(generate_dataset(two_node, spec), tmp_path / "b.ttds")
    assert sha256(tmp_path / "a.ttds") == sha256(tmp_path / "b.ttds")


def test_save_load_roundtrip(tmp_path, ring10):
    spec = PerturbationSpec(per_node=2, window=7, seed=5, stability=SHORT)
    dataset = generate_dataset(ring10, spec)
    path = tmp_path / "ring.ttds"
    save_dataset(dataset, path)
    assert manifest_path(path).exists()
    again = load_dataset(path)
    assert again.fingerprint == ring10.fingerprint
    assert (again.n_nodes, again.window, len(again)) == (10, 7, 20)
    for a, b in zip(dataset.samples, again.samples):
        assert (a.label, a.nodes, a.seed) == (b.label, b.nodes, b.seed)
        np.testing.assert_array_equal(a.omega, b.omega)
    assert again.spec["per_node"] == 2


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.ttds"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(NotADatasetError, match="not a dataset file"):
        load_dataset(path)


def test_load_rejects_other_versions(tmp_path, two_node):
    path = tmp_path / "v.ttds"
    save_dataset(generate_dataset(two_node, PerturbationSpec(per_node=1, window=3, stability=SHORT)), path)
    data = bytearray(path.read_bytes())
    data[4:6] = (9).to_bytes(2, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(DatasetVersionError):
        load_dataset(path)


def test_load_detects_truncation(tmp_path, two_node):
    path = tmp_path / "t.ttds"
    save_dataset(generate_dataset(two_node, PerturbationSpec(per_node=2, window=3, stability=SHORT)), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedRecordError, match="unexpected end of record"):
        load_dataset(path)


def test_load_detects_fingerprint_corruption(tmp_path, two_node):
    path = tmp_path / "f.ttds"
    save_dataset(generate_dataset(two_node, PerturbationSpec(per_node=1, window=3, stability=SHORT)), path)
    data = bytearray(path.read_bytes())
    data[6] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FingerprintCorruptionError):
        load_dataset(path)


def _toy(fingerprint, count, start=0):
    samples = [Sample(np.full((2, 3), float(start + k)), k % 2, (0,), start + k) for k in range(count)]
    return Dataset(fingerprint, 2, 3, samples)


def test_split_fractions_and_multi_to_test():
    single = _toy("aa" * 32, 100)
    multi = _toy("aa" * 32, 30, start=1000)
    train, val, test = split_dataset(single, multi, np.random.default_rng(0))
    assert (len(train), len(val), len(test)) == (60, 20, 50)
    seeds = [s.seed for s in train.samples + val.samples + test.samples]
    assert sorted(seeds) == list(range(100)) + list(range(1000, 1030))
    assert all(s.seed >= 1000 for s in test.samples[-30:])
    assert train.splits == ["train"] * 60


def test_split_ieee39_protocol(ieee39):
    single = generate_dataset(ieee39, PerturbationSpec(per_node=10, window=3, stability=SHORT))
    multi = generate_dataset(ieee39, PerturbationSpec(mode="multi", m=3, combos=5, per_combo=10,
                                                      window=3, stability=SHORT))
    train, val, test = split_dataset(single, multi, np.random.default_rng(1))
    assert (len(train), len(val), len(test)) == (234, 78, 78 + 50)


def test_split_rejects_other_grids():
    with pytest.raises(FingerprintMismatchError):
        split_dataset(_toy("aa" * 32, 10), _toy("bb" * 32, 5), np.random.default_rng(0))


def test_truncate_keeps_leading_columns():
    dataset = _toy("aa" * 32, 4)
    short = dataset.truncate(2)
    assert short.window == 2
    np.testing.assert_array_equal(short.samples[1].omega, dataset.samples[1].omega[:, :2])
    with pytest.raises(ContractError):
        dataset.truncate(4)


def test_split_index_rebuilds_the_same_splits(tmp_path):
    single = _toy("aa" * 32, 50)
    multi = _toy("aa" * 32, 7, start=1000)
    splits = split_dataset(single, multi, np.random.default_rng(5))
    path = save_split_index(splits, tmp_path / "run.splits.json", seed=5)
    again = load_split_index(path, single, multi)
    for first, second in zip(splits, again):
        assert [s.seed for s in first.samples] == [s.seed for s in second.samples]
        assert first.splits == second.splits


def test_split_index_must_match_the_datasets(tmp_path):
    single = _toy("aa" * 32, 20)
    path = save_split_index(split_dataset(single, None, np.random.default_rng(0)), tmp_path / "i.json")
    with pytest.raises(DatasetFormatError, match="does not cover"):
        load_split_index(path, _toy("aa" * 32, 21))
    with pytest.raises(FingerprintMismatchError):
        load_split_index(path, _toy("bb" * 32, 20))
    with pytest.raises(DatasetFormatError, match="multi-node"):
        load_split_index(path, single, _toy("aa" * 32, 3, start=100))


def test_dataset_remembers_its_sampling_interval(two_node):
    spec = PerturbationSpec(per_node=1, window=3, stability=StabilitySettings(dt=0.025, t_label=1.0, window=0.5))
    assert generate_dataset(two_node, spec).dt == 0.025
    assert _toy("aa" * 32, 1).dt == 0.0125


def test_corrupt_sidecar_is_a_format_error(tmp_path, two_node):
    path = tmp_path / "d.ttds"
    save_dataset(generate_dataset(two_node, PerturbationSpec(per_node=1, window=3, stability=SHORT)), path)
    manifest_path(path).write_text("{oops", encoding="utf-8")
    with pytest.raises(DatasetFormatError, match=r"d.ttds.json:1:2"):
        load_dataset(path)


def test_missing_dataset_is_a_format_error(tmp_path):
    with pytest.raises(DatasetFormatError, match="nope.ttds"):
        load_dataset(tmp_path / "nope.ttds")
