"""Cutoff graphs under periodic boundaries and radial-distribution histograms.

Displacements follow the minimum-image rule (x + L/2) mod L - L/2 per axis,
valid only while the cutoff does not exceed half the shortest box edge; the
constructors enforce that precondition. Edges are stored in both directions
with exactly antisymmetric displacement vectors (the reverse edge is the
negation of the forward one, not an independent recomputation).

Everything here is a pure function of immutable inputs and is safe to run in
parallel over frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .trajio import AtomicConfiguration, EnergyNormalizer


class InvalidCutoffError(ValueError):
    """Cutoff or r_max beyond half the shortest box edge (images ambiguous)."""


@dataclass(frozen=True)
class EdgeAttr:
    """Displacement vector and its length for one directed edge."""

    delta: np.ndarray  # (3,)
    dist: float


@dataclass
class GraphConfig:
    """Knobs for graph construction and RDF histograms."""

    cutoff: float = 5.0
    rdf_bins: int = 64
    rdf_r_max: float | None = None       # default: min(box)/2 at call time
    rdf_kernel_width: float | None = None  # default: one bin width

    def __post_init__(self):
        if self.cutoff <= 0.0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        if self.rdf_bins < 2:
            raise ValueError(f"need at least 2 RDF bins, got {self.rdf_bins}")


@dataclass
class ConfigGraph:
    """Attributed directed graph for one configuration.

    node_features rows are one-hot over the species order; edge_deltas and
    edge_dists carry the per-edge minimum-image attributes, aligned with
    edge_index rows (i, j) meaning an edge from i with neighbor j.
    """

    node_features: np.ndarray        # (N, S) one-hot
    edge_index: np.ndarray           # (E, 2) int64 ordered pairs
    edge_deltas: np.ndarray          # (E, 3)
    edge_dists: np.ndarray           # (E,)
    box: np.ndarray                  # (3,)
    reference_positions: np.ndarray  # (N, 3), wrapped
    energy_norm: float | None = None
    species: tuple[str, ...] = field(default_factory=tuple)
    frame_id: int = 0
    _edge_features: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    def edge_attrs(self) -> Iterator[EdgeAttr]:
        for k in range(self.n_edges):
            yield EdgeAttr(delta=self.edge_deltas[k], dist=float(self.edge_dists[k]))

    def edge_features(self) -> np.ndarray:
        """(E, 4) matrix [dx, dy, dz, d] consumed by the encoder (cached)."""
        if self._edge_features is None:
            self._edge_features = np.concatenate(
                [self.edge_deltas, self.edge_dists[:, None]], axis=1)
        return self._edge_features


def min_image_displacement(
    r_i: np.ndarray, r_j: np.ndarray, box: np.ndarray
) -> tuple[np.ndarray, float]:
    """Minimum-image displacement r_i - r_j and its length.

    Components land in [-L/2, L/2) per axis. Inputs are expected wrapped into
    [0, L), though the mod arithmetic tolerates arbitrary reals.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (3,) or np.any(box <= 0.0):
        raise ValueError(f"box must be 3 positive edge lengths, got {box}")
    diff = np.asarray(r_i, dtype=np.float64) - np.asarray(r_j, dtype=np.float64)
    delta = np.mod(diff + 0.5 * box, box) - 0.5 * box
    return delta, float(np.linalg.norm(delta))


def _pairwise_min_image(positions: np.ndarray, box: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Upper-triangle pair indices with min-image deltas and distances."""
    n = positions.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    diff = positions[iu] - positions[ju]
    delta = np.mod(diff + 0.5 * box, box) - 0.5 * box
    dist = np.linalg.norm(delta, axis=1)
    return iu, ju, delta, dist


def build_graph(
    config: AtomicConfiguration,
    cutoff: float,
    normalizer: EnergyNormalizer | None = None,
    species: tuple[str, ...] | None = None,
) -> ConfigGraph:
    """Connect every pair within the minimum-image cutoff, both directions.

    ``species`` fixes the one-hot column order; by default it is the sorted
    set of labels present in the configuration.
    """
    box = config.box
    if cutoff <= 0.0:
        raise InvalidCutoffError(f"cutoff must be positive, got {cutoff}")
    if cutoff > float(np.min(box)) / 2.0:
        raise InvalidCutoffError(
            f"cutoff {cutoff} exceeds half the shortest box edge ({np.min(box) / 2.0}); "
            "minimum-image edges would be ambiguous"
        )

    if species is None:
        species = tuple(sorted(set(config.species)))
    column = {label: k for k, label in enumerate(species)}
    unknown = [s for s in config.species if s not in column]
    if unknown:
        raise ValueError(f"species {sorted(set(unknown))} not in declared set {species}")

    n = config.n_atoms
    one_hot = np.zeros((n, len(species)), dtype=np.float64)
    for row, label in enumerate(config.species):
        one_hot[row, column[label]] = 1.0

    iu, ju, delta, dist = _pairwise_min_image(config.positions, box)
    keep = (dist > 0.0) & (dist <= cutoff)
    iu, ju, delta, dist = iu[keep], ju[keep], delta[keep], dist[keep]

    # mirror the upper triangle so the reverse edge is exactly the negation
    edge_index = np.concatenate(
        [np.stack([iu, ju], axis=1), np.stack([ju, iu], axis=1)], axis=0
    ).astype(np.int64)
    edge_deltas = np.concatenate([delta, -delta], axis=0)
    edge_dists = np.concatenate([dist, dist], axis=0)

    energy_norm = None
    if normalizer is not None and config.energy is not None:
        energy_norm = normalizer.normalize(config.energy)

    return ConfigGraph(
        node_features=one_hot,
        edge_index=edge_index,
        edge_deltas=edge_deltas,
        edge_dists=edge_dists,
        box=box.copy(),
        reference_positions=config.positions.copy(),
        energy_norm=energy_norm,
        species=species,
        frame_id=config.frame_id,
    )


# ---------------------------------------------------------------------------
# radial distribution histograms
# ---------------------------------------------------------------------------

@dataclass
class RdfHistogram:
    """Binned pair-distance histogram over (0, r_max]."""

    bin_centers: np.ndarray
    values: np.ndarray
    r_max: float
    kernel_width: float | None = None


def rdf_bin_centers(r_max: float, bins: int) -> np.ndarray:
    width = r_max / bins
    return (np.arange(bins) + 0.5) * width


def soft_bin_weights(dists: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """Normalized Gaussian bin weights; each row (pair) sums to one.

    Computed as a softmax of -(d - c)^2 / (2 sigma^2) so that vanishing
    kernel widths stay finite and converge to hard assignment.
    """
    logits = -((dists[:, None] - centers[None, :]) ** 2) / (2.0 * sigma * sigma)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def compute_rdf(
    positions: np.ndarray,
    box: np.ndarray,
    r_max: float,
    bins: int,
    mode: str = "hard",
    kernel_width: float | None = None,
) -> RdfHistogram:
    """Histogram of minimum-image pair distances up to r_max.

    hard mode bins each counted pair once; soft mode spreads each pair over
    all bins with Gaussian weights normalized to unit total per pair, so both
    modes sum to the number of counted pairs.
    """
    positions = np.asarray(positions, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    if r_max <= 0.0 or r_max > float(np.min(box)) / 2.0:
        raise ValueError(
            f"r_max must lie in (0, {np.min(box) / 2.0}] for this box, got {r_max}"
        )
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if mode not in ("hard", "soft"):
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")

    centers = rdf_bin_centers(r_max, bins)
    width = r_max / bins
    _, _, _, dist = _pairwise_min_image(positions, box)
    dist = dist[(dist > 0.0) & (dist <= r_max)]

    if mode == "hard":
        values = np.zeros(bins)
        if dist.size:
            idx = np.minimum((dist / width).astype(np.int64), bins - 1)
            np.add.at(values, idx, 1.0)
    else:
        sigma = float(kernel_width) if kernel_width is not None else width
        if sigma <= 0.0:
            raise ValueError(f"kernel width must be positive, got {sigma}")
        values = soft_bin_weights(dist, centers, sigma).sum(axis=0) if dist.size else np.zeros(bins)

    return RdfHistogram(
        bin_centers=centers,
        values=values,
        r_max=float(r_max),
        kernel_width=None if mode == "hard" else (float(kernel_width) if kernel_width is not None else width),
    )


# ---------------------------------------------------------------------------
# JSON debugging interface
# ---------------------------------------------------------------------------

def graph_to_json(graph: ConfigGraph) -> str:
    return json.dumps({
        "node_features": graph.node_features.tolist(),
        "edge_index": graph.edge_index.tolist(),
        "edge_attrs": [
            {"delta": graph.edge_deltas[k].tolist(), "dist": float(graph.edge_dists[k])}
            for k in range(graph.n_edges)
        ],
        "box": graph.box.tolist(),
        "energy_norm": graph.energy_norm,
        "reference_positions": graph.reference_positions.tolist(),
        "species": list(graph.species),
        "frame_id": graph.frame_id,
    })


def graph_from_json(text: str) -> ConfigGraph:
    raw = json.loads(text)
    attrs = raw["edge_attrs"]
    return ConfigGraph(
        node_features=np.array(raw["node_features"], dtype=np.float64),
        edge_index=np.array(raw["edge_index"], dtype=np.int64).reshape(len(attrs), 2),
        edge_deltas=np.array([a["delta"] for a in attrs], dtype=np.float64).reshape(len(attrs), 3),
        edge_dists=np.array([a["dist"] for a in attrs], dtype=np.float64),
        box=np.array(raw["box"], dtype=np.float64),
        reference_positions=np.array(raw["reference_positions"], dtype=np.float64),
        energy_norm=raw["energy_norm"],
        species=tuple(raw["species"]),
        frame_id=int(raw["frame_id"]),
    )
