import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassvae import periodic_graph as pg
from glassvae import synthetic
from glassvae.trajio import AtomicConfiguration, EnergyNormalizer


def brute_force_edges(positions, box, cutoff):
    """Oracle: O(N^2) over all 27 periodic images of each pair."""
    n = len(positions)
    shifts = np.array(list(itertools.product((-1, 0, 1), repeat=3))) * box
    edges = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            candidates = positions[i] - positions[j] + shifts
            dists = np.linalg.norm(candidates, axis=1)
            k = int(np.argmin(dists))
            if 0.0 < dists[k] <= cutoff:
                edges[(i, j)] = (candidates[k], dists[k])
    return edges


# ---------------------------------------------------------------------------
# minimum image
# ---------------------------------------------------------------------------

def test_min_image_identical_points():
    delta, dist = pg.min_image_displacement(
        np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]), np.array([10.0, 10.0, 10.0]))
    assert np.array_equal(delta, np.zeros(3))
    assert dist == 0.0


def test_min_image_wraps_across_boundary():
    delta, dist = pg.min_image_displacement(
        np.array([9.5, 0.0, 0.0]), np.array([0.5, 0.0, 0.0]), np.array([10.0, 10.0, 10.0]))
    assert np.allclose(delta, [-1.0, 0.0, 0.0], atol=1e-14)
    assert dist == pytest.approx(1.0, abs=1e-14)


def test_min_image_components_in_half_open_box():
    r = np.random.default_rng(3)
    box = np.array([7.0, 9.0, 11.0])
    for _ in range(200):
        a, b = r.uniform(0, box, size=(2, 3))
        delta, _ = pg.min_image_displacement(a, b, box)
        assert np.all(delta >= -box / 2) and np.all(delta < box / 2)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_min_image_translation_cancels(seed):
    r = np.random.default_rng(seed)
    box = np.array([10.0, 10.0, 10.0])
    a, b = r.uniform(0, box, size=(2, 3))
    t = r.uniform(-30.0, 30.0, size=3)
    d0, _ = pg.min_image_displacement(a, b, box)
    d1, _ = pg.min_image_displacement(np.mod(a + t, box), np.mod(b + t, box), box)
    assert np.allclose(d0, d1, atol=1e-12)


def test_min_image_rejects_bad_box():
    with pytest.raises(ValueError, match="box"):
        pg.min_image_displacement(np.zeros(3), np.zeros(3), np.array([1.0, -2.0, 3.0]))


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def _two_atom_config(distance, box_edge):
    return AtomicConfiguration(
        positions=np.array([[1.0, 1.0, 1.0], [1.0 + distance, 1.0, 1.0]]),
        species=["Cu", "Zr"],
        box=np.array([box_edge] * 3),
    )


def test_two_atoms_within_cutoff_gives_two_directed_edges():
    graph = pg.build_graph(_two_atom_config(3.0, 12.0), cutoff=5.0)
    assert graph.n_edges == 2
    assert sorted(map(tuple, graph.edge_index.tolist())) == [(0, 1), (1, 0)]
    assert np.allclose(graph.edge_dists, [3.0, 3.0])


def test_two_atoms_beyond_cutoff_gives_no_edges():
    graph = pg.build_graph(_two_atom_config(6.0, 14.0), cutoff=5.0)
    assert graph.n_edges == 0


def test_cutoff_beyond_half_box_rejected():
    with pytest.raises(pg.InvalidCutoffError, match="half"):
        pg.build_graph(_two_atom_config(3.0, 9.0), cutoff=5.0)
    with pytest.raises(pg.InvalidCutoffError):
        pg.build_graph(_two_atom_config(3.0, 12.0), cutoff=0.0)


@pytest.mark.parametrize("seed", range(6))
def test_edges_match_brute_force_over_27_images(seed):
    r = np.random.default_rng(seed)
    snap = synthetic.random_configuration(16, 8.0, r)
    cutoff = 3.9
    graph = pg.build_graph(snap, cutoff)
    oracle = brute_force_edges(snap.positions, snap.box, cutoff)

    got = {tuple(e) for e in graph.edge_index.tolist()}
    assert got == set(oracle)
    for k in range(graph.n_edges):
        i, j = graph.edge_index[k]
        delta_expected, dist_expected = oracle[(int(i), int(j))]
        assert np.allclose(graph.edge_deltas[k], delta_expected, atol=1e-10)
        assert graph.edge_dists[k] == pytest.approx(dist_expected, abs=1e-10)


def test_edge_antisymmetry_is_exact():
    r = np.random.default_rng(11)
    snap = synthetic.random_configuration(12, 9.0, r)
    graph = pg.build_graph(snap, 4.0)
    lookup = {tuple(e): k for k, e in enumerate(graph.edge_index.tolist())}
    for (i, j), k in lookup.items():
        rev = lookup[(j, i)]
        assert np.array_equal(graph.edge_deltas[rev], -graph.edge_deltas[k])
        assert graph.edge_dists[rev] == graph.edge_dists[k]


def test_edge_dists_equal_delta_norms():
    graph = pg.build_graph(synthetic.random_configuration(
        10, 10.0, np.random.default_rng(0)), 5.0)
    norms = np.linalg.norm(graph.edge_deltas, axis=1)
    assert np.allclose(norms, graph.edge_dists, rtol=1e-12)
    assert np.all(graph.edge_dists > 0.0)
    assert np.all(graph.edge_dists <= 5.0)


def test_node_features_one_hot_and_energy_norm():
    config = _two_atom_config(3.0, 12.0)
    config.energy = -4.5
    norm = EnergyNormalizer(e_min=-5.0, e_max=-4.0)
    graph = pg.build_graph(config, 5.0, norm)
    assert np.array_equal(graph.node_features, [[1.0, 0.0], [0.0, 1.0]])
    assert graph.energy_norm == pytest.approx(50.0)
    assert graph.species == ("Cu", "Zr")


def test_unknown_species_rejected():
    config = _two_atom_config(3.0, 12.0)
    with pytest.raises(ValueError, match="species"):
        pg.build_graph(config, 5.0, species=("Cu",))


def test_rotation_preserves_distances_in_free_cell():
    r = np.random.default_rng(7)
    positions = r.uniform(0.0, 6.0, size=(14, 3))
    q, _ = np.linalg.qr(r.standard_normal((3, 3)))
    big_box = np.array([1000.0] * 3)
    base = positions - positions.mean(axis=0) + 500.0
    rotated = (positions - positions.mean(axis=0)) @ q.T + 500.0
    for i in range(14):
        for j in range(i + 1, 14):
            d_base, n_base = pg.min_image_displacement(base[i], base[j], big_box)
            d_rot, n_rot = pg.min_image_displacement(rotated[i], rotated[j], big_box)
            assert abs(n_base - n_rot) <= 1e-12 * max(n_base, 1.0)
            assert np.allclose(d_rot, q @ d_base, atol=1e-9)


# ---------------------------------------------------------------------------
# RDF histograms
# ---------------------------------------------------------------------------

def test_rdf_hard_single_pair_lands_in_its_bin():
    config = _two_atom_config(2.5, 12.0)
    hist = pg.compute_rdf(config.positions, config.box, r_max=5.0, bins=10, mode="hard")
    # bin width 0.5, distance 2.5 -> bin index 5 (half-open bins (2.5, 3.0])
    assert hist.values.sum() == 1.0
    assert hist.values[5] == 1.0
    assert hist.bin_centers[0] == pytest.approx(0.25)


def test_rdf_hard_counts_all_pairs_within_range():
    r = np.random.default_rng(5)
    snap = synthetic.random_configuration(20, 10.0, r)
    hist = pg.compute_rdf(snap.positions, snap.box, r_max=5.0, bins=32, mode="hard")
    iu, ju = np.triu_indices(20, k=1)
    dists = np.array([
        pg.min_image_displacement(snap.positions[i], snap.positions[j], snap.box)[1]
        for i, j in zip(iu, ju)
    ])
    expected = int(np.sum((dists > 0) & (dists <= 5.0)))
    assert hist.values.sum() == pytest.approx(expected)


def test_rdf_soft_converges_to_hard_oracle():
    r = np.random.default_rng(9)
    snap = synthetic.random_configuration(24, 10.0, r)
    bins = 25
    width = 5.0 / bins
    hard = pg.compute_rdf(snap.positions, snap.box, 5.0, bins, mode="hard")
    soft = pg.compute_rdf(snap.positions, snap.box, 5.0, bins, mode="soft",
                          kernel_width=1e-4 * width)
    assert np.max(np.abs(soft.values - hard.values)) < 1e-6


def test_rdf_soft_pairs_carry_unit_weight():
    r = np.random.default_rng(12)
    snap = synthetic.random_configuration(15, 10.0, r)
    soft = pg.compute_rdf(snap.positions, snap.box, 5.0, 16, mode="soft")
    hard = pg.compute_rdf(snap.positions, snap.box, 5.0, 16, mode="hard")
    assert soft.values.sum() == pytest.approx(hard.values.sum(), rel=1e-12)


def test_rdf_ideal_gas_follows_shell_volume():
    n, edge = 512, 10.0
    r = np.random.default_rng(42)
    positions = r.uniform(0.0, edge, size=(n, 3))
    bins = 25
    hist = pg.compute_rdf(positions, np.array([edge] * 3), r_max=5.0, bins=bins, mode="hard")
    width = 5.0 / bins
    pairs = n * (n - 1) / 2
    volume = edge ** 3
    expected = pairs * 4.0 * np.pi * hist.bin_centers ** 2 * width / volume
    mask = expected >= 2000.0
    assert mask.sum() >= 8
    rel = np.abs(hist.values[mask] - expected[mask]) / expected[mask]
    assert np.max(rel) < 0.10


def test_rdf_rejects_r_max_beyond_half_box():
    with pytest.raises(ValueError, match="r_max"):
        pg.compute_rdf(np.zeros((3, 3)), np.array([10.0] * 3), r_max=6.0, bins=8)


def test_rdf_rejects_bad_mode_and_bins():
    pos = np.zeros((3, 3))
    box = np.array([10.0] * 3)
    with pytest.raises(ValueError, match="mode"):
        pg.compute_rdf(pos, box, 5.0, 8, mode="fuzzy")
    with pytest.raises(ValueError, match="bins"):
        pg.compute_rdf(pos, box, 5.0, 1)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_graph_json_round_trip():
    graph = pg.build_graph(
        synthetic.random_configuration(7, 10.0, np.random.default_rng(2)), 4.5)
    graph.energy_norm = 12.5
    text = pg.graph_to_json(graph)
    back = pg.graph_from_json(text)
    assert np.array_equal(back.node_features, graph.node_features)
    assert np.array_equal(back.edge_index, graph.edge_index)
    assert np.array_equal(back.edge_deltas, graph.edge_deltas)
    assert np.array_equal(back.edge_dists, graph.edge_dists)
    assert np.array_equal(back.box, graph.box)
    assert np.array_equal(back.reference_positions, graph.reference_positions)
    assert back.energy_norm == graph.energy_norm
    assert back.species == graph.species
    json.loads(text)  # stays plain JSON
