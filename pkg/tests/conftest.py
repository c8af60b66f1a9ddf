import numpy as np
import pytest

from glassvae import model as mdl
from glassvae import periodic_graph as pg
from glassvae import synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def tiny_model_config():
    # small dims keep finite-difference sweeps cheap
    return mdl.ModelConfig(
        hidden_dim=6, latent_dim=16, n_mp_layers=1, n_edge_blocks=1,
        species_count=2, energy_head_dims=(6,), seed=5,
    )


@pytest.fixture
def small_graph(rng):
    snap = synthetic.random_configuration(8, 10.0, rng, frame_id=1)
    return pg.build_graph(snap, 4.5)


def make_graph(seed: int, n_atoms: int = 10, box_edge: float = 10.0, cutoff: float = 4.5):
    r = np.random.default_rng(seed)
    snap = synthetic.random_configuration(n_atoms, box_edge, r, frame_id=seed)
    return pg.build_graph(snap, cutoff)
