import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassvae import trajio

THREE_ATOM_DUMP = """\
ITEM: TIMESTEP
100
ITEM: NUMBER OF ATOMS
3
ITEM: BOX BOUNDS pp pp pp
0.0 10.0
0.0 10.0
0.0 10.0
ITEM: ATOMS id type x y z
2 2 4.0 5.0 6.0
1 1 1.0 2.0 3.0
3 1 7.0 8.0 9.0
"""

SPECIES = {1: "Cu", 2: "Zr"}


def make_dump(frames, n_atoms=4, box=10.0, start_step=0):
    """Programmatic dump with atoms on a jittered grid."""
    rng = np.random.default_rng(77)
    out = []
    for f in range(frames):
        out.append("ITEM: TIMESTEP")
        out.append(str(start_step + f))
        out.append("ITEM: NUMBER OF ATOMS")
        out.append(str(n_atoms))
        out.append("ITEM: BOX BOUNDS pp pp pp")
        for _ in range(3):
            out.append(f"0.0 {box}")
        out.append("ITEM: ATOMS id type x y z")
        for a in range(n_atoms):
            x, y, z = rng.uniform(0, box, size=3)
            out.append(f"{a + 1} {a % 2 + 1} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# parse_dump
# ---------------------------------------------------------------------------

def test_parse_three_atom_fixture_field_by_field():
    configs = trajio.parse_dump(io.StringIO(THREE_ATOM_DUMP), SPECIES, temperature_tag=700.0)
    assert len(configs) == 1
    c = configs[0]
    assert c.frame_id == 100
    assert c.n_atoms == 3
    assert np.array_equal(c.box, [10.0, 10.0, 10.0])
    # atoms reordered by id
    assert np.array_equal(c.positions, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
    assert c.species == ["Cu", "Zr", "Cu"]
    assert c.energy is None
    assert c.temperature_tag == 700.0


def test_parse_multi_frame_dump_with_108_atoms():
    text = make_dump(frames=2, n_atoms=108)
    configs = trajio.parse_dump(io.StringIO(text), SPECIES)
    assert len(configs) == 2
    assert all(c.n_atoms == 108 for c in configs)
    assert [c.frame_id for c in configs] == [0, 1]


def test_parse_empty_stream_gives_empty_list():
    assert trajio.parse_dump(io.StringIO("")) == []


def test_parse_shifts_box_origin_and_wraps():
    text = THREE_ATOM_DUMP.replace("0.0 10.0", "-5.0 5.0")
    configs = trajio.parse_dump(io.StringIO(text), SPECIES)
    c = configs[0]
    assert np.array_equal(c.box, [10.0, 10.0, 10.0])
    assert np.all(c.positions >= 0.0) and np.all(c.positions < 10.0)
    # atom 1 at (1,2,3) shifts by +5 per axis
    assert np.allclose(c.positions[0], [6.0, 7.0, 8.0])


def test_parse_malformed_header_names_line():
    bad = THREE_ATOM_DUMP.replace("ITEM: NUMBER OF ATOMS", "ITEM: WRONG")
    with pytest.raises(trajio.ParseError, match="line 3"):
        trajio.parse_dump(io.StringIO(bad))


def test_parse_atom_count_mismatch_is_structural():
    truncated = "\n".join(THREE_ATOM_DUMP.splitlines()[:-1]) + "\n"
    with pytest.raises(trajio.StructuralError, match="3 atoms"):
        trajio.parse_dump(io.StringIO(truncated))


def test_parse_triclinic_box_unsupported():
    tilted = THREE_ATOM_DUMP.replace(
        "ITEM: BOX BOUNDS pp pp pp", "ITEM: BOX BOUNDS xy xz yz pp pp pp"
    ).replace("0.0 10.0", "0.0 10.0 0.5")
    with pytest.raises(trajio.UnsupportedFormatError, match="triclinic"):
        trajio.parse_dump(io.StringIO(tilted))


def test_parse_missing_required_column():
    bad = THREE_ATOM_DUMP.replace("id type x y z", "id type xs ys zs")
    with pytest.raises(trajio.UnsupportedFormatError, match="lack"):
        trajio.parse_dump(io.StringIO(bad))


def test_parse_unknown_type_with_species_map():
    with pytest.raises(trajio.ParseError, match="type 2"):
        trajio.parse_dump(io.StringIO(THREE_ATOM_DUMP), {1: "Cu"})


def test_parse_duplicate_atom_ids():
    bad = THREE_ATOM_DUMP.replace("2 2 4.0 5.0 6.0", "1 2 4.0 5.0 6.0")
    with pytest.raises(trajio.StructuralError, match="duplicate"):
        trajio.parse_dump(io.StringIO(bad))


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------

def test_join_energies_direct_assignment():
    configs = trajio.parse_dump(io.StringIO(THREE_ATOM_DUMP), SPECIES)
    trajio.join_energies(configs, {100: -4.9})
    assert configs[0].energy == -4.9


def test_join_energies_missing_frame_names_id():
    configs = trajio.parse_dump(io.StringIO(make_dump(3, start_step=5)), SPECIES)
    with pytest.raises(trajio.MissingFrameError, match="7"):
        trajio.join_energies(configs, {5: -1.0, 6: -2.0})


def test_join_energies_matches_by_id_not_position():
    configs = trajio.parse_dump(io.StringIO(make_dump(5)), SPECIES)
    table = {4: -4.0, 1: -1.0, 3: -3.0, 0: 0.0, 2: -2.0}
    trajio.join_energies(configs, table)
    for c in configs:
        assert c.energy == table[c.frame_id]


def test_read_energy_csv_with_header_and_blank_lines():
    text = "frame_id,energy_eV\n0,-5.0\n\n1,-4.75\n"
    assert trajio.read_energy_csv(io.StringIO(text)) == {0: -5.0, 1: -4.75}


def test_read_energy_csv_rejects_garbage_row():
    with pytest.raises(trajio.ParseError, match="line 2"):
        trajio.read_energy_csv(io.StringIO("0,-5.0\nnot,anumber\n"))


def test_read_species_map():
    text = "# types\n1=Cu\n2 = Zr\n"
    assert trajio.read_species_map(io.StringIO(text)) == {1: "Cu", 2: "Zr"}
    with pytest.raises(trajio.ParseError):
        trajio.read_species_map(io.StringIO("Cu\n"))


# ---------------------------------------------------------------------------
# normalizer
# ---------------------------------------------------------------------------

def test_normalizer_endpoints():
    norm = trajio.fit_normalizer([-5.0, -4.0])
    assert norm.normalize(-5.0) == 0.0
    assert norm.normalize(-4.0) == 100.0


def test_normalizer_degenerate_range_maps_to_zero():
    norm = trajio.fit_normalizer([-5.0, -5.0])
    assert norm.normalize(-5.0) == 0.0
    assert norm.denormalize(0.0) == -5.0


def test_normalizer_midpoint():
    norm = trajio.fit_normalizer([-5.0, -4.0])
    assert norm.normalize(-4.5) == pytest.approx(50.0)


def test_normalizer_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        trajio.fit_normalizer([])


@given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e6), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_normalizer_round_trip(e_min, spread, frac):
    norm = trajio.EnergyNormalizer(e_min=e_min, e_max=e_min + spread)
    e = e_min + frac * spread
    back = norm.denormalize(norm.normalize(e))
    assert back == pytest.approx(e, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _configs(n, temps=(300.0,), seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        out.append(trajio.AtomicConfiguration(
            positions=rng.uniform(0, 10, size=(4, 3)),
            species=["Cu", "Zr", "Cu", "Zr"],
            box=np.array([10.0] * 3),
            energy=float(-100 + k),
            temperature_tag=temps[k % len(temps)],
            frame_id=k,
        ))
    return out


def test_split_ten_at_eighty_percent():
    ds = trajio.split_dataset(_configs(10), ratio=0.8, seed=0)
    assert len(ds.train_ids) == 8
    assert len(ds.test_ids) == 2


def test_split_same_seed_identical():
    a = trajio.split_dataset(_configs(20), ratio=0.8, seed=123)
    b = trajio.split_dataset(_configs(20), ratio=0.8, seed=123)
    assert a.train_ids == b.train_ids
    assert a.test_ids == b.test_ids


def test_split_stratified_per_temperature():
    temps = (100.0, 200.0, 300.0, 400.0, 500.0)
    ds = trajio.split_dataset(_configs(50, temps=temps), ratio=0.8, seed=7)
    by_id = {c.frame_id: c for c in ds.configs}
    for t in temps:
        n_train = sum(1 for i in ds.train_ids if by_id[i].temperature_tag == t)
        n_test = sum(1 for i in ds.test_ids if by_id[i].temperature_tag == t)
        assert (n_train, n_test) == (8, 2)


def test_split_disjoint_and_complete():
    ds = trajio.split_dataset(_configs(17), ratio=0.7, seed=2)
    assert set(ds.train_ids).isdisjoint(ds.test_ids)
    assert set(ds.train_ids) | set(ds.test_ids) == {c.frame_id for c in ds.configs}


def test_split_normalizer_fit_on_train_only():
    ds = trajio.split_dataset(_configs(10), ratio=0.8, seed=0)
    train_energies = [c.energy for c in ds.train_configs]
    assert ds.energy_norm.e_min == min(train_energies)
    assert ds.energy_norm.e_max == max(train_energies)


def test_split_rejects_bad_inputs():
    with pytest.raises(ValueError, match="ratio"):
        trajio.split_dataset(_configs(10), ratio=1.5)
    with pytest.raises(ValueError, match="at least 2"):
        trajio.split_dataset(_configs(1))
    configs = _configs(5)
    configs[2].energy = None
    with pytest.raises(ValueError, match="energies"):
        trajio.split_dataset(configs)


def test_split_max_frames_per_temp_caps_strata():
    ds = trajio.split_dataset(_configs(30, temps=(1.0, 2.0)), ratio=0.8, seed=0,
                              max_frames_per_temp=10)
    assert len(ds.configs) == 20


# ---------------------------------------------------------------------------
# serialization round trips
# ---------------------------------------------------------------------------

def test_config_jsonl_round_trip_is_field_exact(tmp_path):
    configs = trajio.parse_dump(io.StringIO(make_dump(3, n_atoms=6)), SPECIES,
                                temperature_tag=840.0)
    trajio.join_energies(configs, {0: -5.123456789012345, 1: -4.9, 2: -4.7})
    path = tmp_path / "configs.jsonl"
    trajio.write_configs_jsonl(configs, path)
    back = trajio.read_configs_jsonl(path)
    assert len(back) == len(configs)
    for a, b in zip(configs, back):
        assert a.frame_id == b.frame_id
        assert a.temperature_tag == b.temperature_tag
        assert a.energy == b.energy
        assert a.species == b.species
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.box, b.box)


def test_dataset_save_load_round_trip(tmp_path):
    ds = trajio.split_dataset(_configs(12, temps=(1.0, 2.0)), ratio=0.75, seed=3)
    path = tmp_path / "dataset.jsonl"
    trajio.save_dataset(ds, path)
    back = trajio.load_dataset(path)
    assert back.train_ids == ds.train_ids
    assert back.test_ids == ds.test_ids
    assert back.energy_norm == ds.energy_norm
    assert len(back.configs) == len(ds.configs)


def test_dataset_validates_split():
    configs = _configs(4)
    norm = trajio.fit_normalizer([c.energy for c in configs])
    with pytest.raises(ValueError, match="overlap"):
        trajio.Dataset(configs, norm, train_ids=[0, 1, 2], test_ids=[2, 3])
    with pytest.raises(ValueError, match="cover"):
        trajio.Dataset(configs, norm, train_ids=[0, 1], test_ids=[3])


def test_wrap_positions_half_open():
    box = np.array([10.0, 10.0, 10.0])
    wrapped = trajio.wrap_positions(np.array([[10.0, -0.5, 25.0]]), box)
    assert np.all(wrapped >= 0.0) and np.all(wrapped < 10.0)
    assert np.allclose(wrapped, [[0.0, 9.5, 5.0]])


def test_species_order_sorted():
    configs = _configs(3)
    assert trajio.species_order(configs) == ("Cu", "Zr")
