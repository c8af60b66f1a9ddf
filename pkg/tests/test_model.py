import numpy as np
import pytest

from glassvae import autodiff as ad
from glassvae import model as mdl
from glassvae import periodic_graph as pg
from glassvae import synthetic
from glassvae.autodiff import Tensor
from glassvae.trajio import AtomicConfiguration, wrap_positions

from conftest import make_graph

CUTOFF = 4.5


def small_params(seed=5):
    return mdl.init_params(mdl.ModelConfig(
        hidden_dim=8, latent_dim=16, n_mp_layers=1, n_edge_blocks=1,
        species_count=2, energy_head_dims=(8,), seed=seed))


# ---------------------------------------------------------------------------
# configuration validation
# ---------------------------------------------------------------------------

def test_config_rejects_bad_dims():
    with pytest.raises(ValueError, match=">= 1"):
        mdl.ModelConfig(hidden_dim=0)
    with pytest.raises(ValueError, match="latent_dim"):
        mdl.ModelConfig(latent_dim=4)
    with pytest.raises(ValueError, match="latent_dim"):
        mdl.ModelConfig(latent_dim=128)
    with pytest.raises(ValueError, match="pooling"):
        mdl.ModelConfig(pooling="max")


def test_config_warns_outside_recommended_latent_range():
    with pytest.warns(UserWarning, match="16-32"):
        mdl.ModelConfig(latent_dim=8)
    with pytest.warns(UserWarning, match="16-32"):
        mdl.ModelConfig(latent_dim=64)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_encode_same_seed_identical_code():
    graph = make_graph(1)
    params = small_params()
    a = mdl.encode(graph, params, np.random.default_rng(7))
    b = mdl.encode(graph, params, np.random.default_rng(7))
    for x, y in ((a.mu, b.mu), (a.log_var, b.log_var), (a.z, b.z),
                 (a.edge_descriptor, b.edge_descriptor)):
        assert np.array_equal(x.data, y.data)
    assert np.array_equal(a.eps, b.eps)


def test_encode_reparameterization_identity():
    graph = make_graph(2)
    code = mdl.encode(graph, small_params(), np.random.default_rng(3))
    rebuilt = code.mu.data + np.exp(0.5 * code.log_var.data) * code.eps
    assert np.allclose(rebuilt, code.z.data, atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_encode_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    snap = synthetic.random_configuration(14, 10.0, r, frame_id=seed)
    graph = pg.build_graph(snap, CUTOFF)
    params = small_params()
    base = mdl.encode(graph, params, rng=None)
    for _ in range(5):
        perm = r.permutation(snap.n_atoms)
        permuted = AtomicConfiguration(
            positions=snap.positions[perm],
            species=[snap.species[p] for p in perm],
            box=snap.box, frame_id=seed)
        other = mdl.encode(pg.build_graph(permuted, CUTOFF), params, rng=None)
        assert ad.relative_error(base.mu.data, other.mu.data) < 1e-6
        assert ad.relative_error(base.log_var.data, other.log_var.data) < 1e-6
        assert ad.relative_error(base.edge_descriptor.data, other.edge_descriptor.data) < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_encode_translation_invariance(seed):
    r = np.random.default_rng(100 + seed)
    snap = synthetic.random_configuration(12, 10.0, r, frame_id=seed)
    graph = pg.build_graph(snap, CUTOFF)
    params = small_params()
    base = mdl.encode(graph, params, rng=None)
    shift = r.uniform(-15.0, 15.0, size=3)
    moved = AtomicConfiguration(
        positions=wrap_positions(snap.positions + shift, snap.box),
        species=list(snap.species), box=snap.box, frame_id=seed)
    other = mdl.encode(pg.build_graph(moved, CUTOFF), params, rng=None)
    assert ad.relative_error(base.mu.data, other.mu.data) < 1e-12
    assert ad.relative_error(base.log_var.data, other.log_var.data) < 1e-12
    assert ad.relative_error(base.edge_descriptor.data, other.edge_descriptor.data) < 1e-12


def test_encode_rejects_edgeless_graph():
    config = AtomicConfiguration(
        positions=np.array([[1.0, 1.0, 1.0], [8.0, 8.0, 8.0]]),
        species=["Cu", "Zr"], box=np.array([20.0] * 3))
    graph = pg.build_graph(config, cutoff=2.0)
    with pytest.raises(mdl.DegenerateGraphError, match="no edges"):
        mdl.encode(graph, small_params(), rng=None)


def test_encode_without_rng_reduces_to_mean():
    graph = make_graph(3)
    code = mdl.encode(graph, small_params(), rng=None)
    assert np.array_equal(code.z.data, code.mu.data)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def test_decode_zero_position_head_returns_reference_exactly():
    graph = make_graph(4)
    params = small_params()
    for name in params.names():
        if name.startswith("dec_pos"):
            params[name].data[...] = 0.0
    _, recon = mdl.reconstruct(graph, params, rng=None)
    assert np.array_equal(recon.positions_hat.data, graph.reference_positions)


def test_decode_node_probs_on_simplex_for_random_params():
    for seed in range(5):
        graph = make_graph(30 + seed)
        _, recon = mdl.reconstruct(graph, small_params(seed), rng=None)
        sums = recon.node_probs.data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-6)
        assert np.all(recon.node_probs.data >= 0.0)


def test_decode_distinct_latents_give_distinct_edges():
    graph = make_graph(5)
    params = small_params()
    code = mdl.encode(graph, params, rng=None)
    z_a = mdl.LatentCode(code.mu, code.log_var, Tensor(code.mu.data + 1.0),
                         code.edge_descriptor, code.eps)
    z_b = mdl.LatentCode(code.mu, code.log_var, Tensor(code.mu.data - 1.0),
                         code.edge_descriptor, code.eps)
    recon_a = mdl.decode(z_a, graph, params)
    recon_b = mdl.decode(z_b, graph, params)
    assert not np.allclose(recon_a.edge_dist_hat.data, recon_b.edge_dist_hat.data)


def test_decode_rejects_latent_size_mismatch():
    graph = make_graph(6)
    params = small_params()
    code = mdl.encode(graph, params, rng=None)
    bad = mdl.LatentCode(code.mu, code.log_var, Tensor(np.zeros((1, 7))),
                         code.edge_descriptor, code.eps)
    with pytest.raises(ValueError, match="latent"):
        mdl.decode(bad, graph, params)


# ---------------------------------------------------------------------------
# energy head
# ---------------------------------------------------------------------------

def test_predict_energy_deterministic_and_ignores_z():
    graph = make_graph(7)
    params = small_params()
    code = mdl.encode(graph, params, np.random.default_rng(1))
    first = mdl.predict_energy(code, params).item()
    second = mdl.predict_energy(code, params).item()
    assert first == second
    shifted = mdl.LatentCode(code.mu, code.log_var,
                             Tensor(code.z.data + 5.0), code.edge_descriptor, code.eps)
    assert mdl.predict_energy(shifted, params).item() == first


def test_reparameterization_gradients_flow():
    # d loss / d mu and d loss / d log_var are nonzero and match FD through
    # z = mu + exp(0.5 log_var) * eps
    r = np.random.default_rng(6)
    eps = r.standard_normal((1, 4))
    w = r.standard_normal((4, 1))

    def loss_of(theta):
        mu = ad.slice_cols(theta, 0, 4)
        log_var = ad.slice_cols(theta, 4, 8)
        z = ad.add(mu, ad.mul(ad.exp(ad.mul(log_var, Tensor(0.5))), Tensor(eps)))
        return ad.tsum(ad.power(ad.matmul(z, Tensor(w)), 2.0))

    theta0 = r.standard_normal((1, 8))
    leaf = Tensor(theta0.copy(), requires_grad=True)
    ad.backward(loss_of(leaf))
    fd = ad.central_difference(lambda v: loss_of(Tensor(v)).item(), theta0.copy())
    assert ad.relative_error(leaf.grad, fd) < 1e-4
    assert np.linalg.norm(leaf.grad[:, :4]) > 1e-8
    assert np.linalg.norm(leaf.grad[:, 4:]) > 1e-8


# ---------------------------------------------------------------------------
# parameter persistence
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = small_params(seed=9)
    path = tmp_path / "model.npz"
    mdl.save_checkpoint(path, params, extras={"epoch": np.array(12)})
    loaded, extras = mdl.load_checkpoint(path)
    assert loaded.config == params.config
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)
        assert loaded[name].data.tobytes() == params[name].data.tobytes()
    assert int(extras["epoch"]) == 12


def test_checkpoint_rejects_missing_or_misshapen_params(tmp_path):
    params = small_params()
    path = tmp_path / "model.npz"
    mdl.save_checkpoint(path, params)

    import json
    import zipfile
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    del arrays["param/mu_head.w"]
    np.savez(tmp_path / "missing.npz", **arrays)
    with pytest.raises(ValueError, match="missing parameter"):
        mdl.load_checkpoint(tmp_path / "missing.npz")

    arrays["param/mu_head.w"] = np.zeros((2, 2))
    np.savez(tmp_path / "badshape.npz", **arrays)
    with pytest.raises(ValueError, match="shape"):
        mdl.load_checkpoint(tmp_path / "badshape.npz")


def test_params_copy_is_independent():
    params = small_params()
    clone = params.copy()
    clone["mu_head.w"].data[...] = 99.0
    assert not np.array_equal(params["mu_head.w"].data, clone["mu_head.w"].data)


def test_pooling_sum_option_changes_output():
    graph = make_graph(8)
    mean_params = mdl.init_params(mdl.ModelConfig(
        hidden_dim=8, latent_dim=16, n_mp_layers=1, n_edge_blocks=1, seed=2, pooling="mean"))
    sum_params = mdl.init_params(mdl.ModelConfig(
        hidden_dim=8, latent_dim=16, n_mp_layers=1, n_edge_blocks=1, seed=2, pooling="sum"))
    a = mdl.encode(graph, mean_params, rng=None)
    b = mdl.encode(graph, sum_params, rng=None)
    assert not np.allclose(a.mu.data, b.mu.data)
