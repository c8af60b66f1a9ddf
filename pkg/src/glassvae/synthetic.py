"""Synthetic desk-scale fixtures: random boxes and harmonic-cluster datasets.

The harmonic generator places a fixed set of anchor sites in a periodic box,
jiggles atoms around them with a temperature-dependent amplitude, and assigns
the energy analytically as a spring sum over minimum-image displacements
from the sites. That gives a ground truth an encoder can actually learn at
desk scale, with species tied to sites so per-node identity is recoverable.
"""

from __future__ import annotations

import numpy as np

from .periodic_graph import min_image_displacement
from .trajio import AtomicConfiguration, wrap_positions


def random_configuration(
    n_atoms: int,
    box_edge: float,
    rng: np.random.Generator,
    species: tuple[str, ...] = ("Cu", "Zr"),
    frame_id: int = 0,
) -> AtomicConfiguration:
    """Uniform random positions and species in a cubic box."""
    positions = rng.uniform(0.0, box_edge, size=(n_atoms, 3))
    labels = [species[int(k)] for k in rng.integers(0, len(species), size=n_atoms)]
    return AtomicConfiguration(
        positions=positions,
        species=labels,
        box=np.array([box_edge] * 3),
        energy=None,
        temperature_tag=0.0,
        frame_id=frame_id,
    )


def harmonic_sites(
    n_atoms: int, box_edge: float, rng: np.random.Generator, min_separation: float = 2.0
) -> np.ndarray:
    """Anchor sites with a minimum pair separation (rejection sampling)."""
    sites: list[np.ndarray] = []
    box = np.array([box_edge] * 3)
    attempts = 0
    while len(sites) < n_atoms:
        attempts += 1
        if attempts > 100_000:
            raise RuntimeError(
                f"could not place {n_atoms} sites at separation {min_separation} in box {box_edge}"
            )
        candidate = rng.uniform(0.0, box_edge, size=3)
        ok = all(
            min_image_displacement(candidate, s, box)[1] >= min_separation for s in sites
        )
        if ok:
            sites.append(candidate)
    return np.array(sites)


def harmonic_energy(
    positions: np.ndarray, sites: np.ndarray, box: np.ndarray,
    spring_k: float, base_energy: float,
) -> float:
    """base + k/2 * sum of squared minimum-image displacements from the sites."""
    total = 0.0
    for r, s in zip(positions, sites):
        _, dist = min_image_displacement(r, s, box)
        total += dist * dist
    return base_energy + 0.5 * spring_k * total


def harmonic_dataset_configs(
    n_configs: int = 200,
    n_atoms: int = 16,
    box_edge: float = 10.0,
    seed: int = 0,
    temperatures: tuple[float, ...] = (100.0, 300.0, 500.0, 700.0),
    spring_k: float = 5.0,
    base_energy: float = -120.0,
    species: tuple[str, ...] = ("Cu", "Zr"),
) -> list[AtomicConfiguration]:
    """Harmonic-cluster snapshots with analytically assigned energies.

    Displacement amplitude grows with the temperature tag, so energies spread
    over a wide, temperature-stratified range. Species alternate over the
    fixed sites, identical in every frame.
    """
    rng = np.random.default_rng(seed)
    box = np.array([box_edge] * 3)
    sites = harmonic_sites(n_atoms, box_edge, rng)
    labels = [species[k % len(species)] for k in range(n_atoms)]

    configs: list[AtomicConfiguration] = []
    for idx in range(n_configs):
        temp = temperatures[idx % len(temperatures)]
        scale = 0.05 + 0.45 * (temp / max(temperatures))
        amplitude = scale * (0.75 + 0.5 * rng.uniform())
        displaced = sites + rng.normal(0.0, amplitude, size=sites.shape)
        positions = wrap_positions(displaced, box)
        energy = harmonic_energy(positions, sites, box, spring_k, base_energy)
        configs.append(AtomicConfiguration(
            positions=positions,
            species=list(labels),
            box=box.copy(),
            energy=energy,
            temperature_tag=temp,
            frame_id=idx,
        ))
    return configs
