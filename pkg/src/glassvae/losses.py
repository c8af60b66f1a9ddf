"""The five-term physics-regularized training objective.

Terms (all non-negative, all differentiable through the autodiff kernel):
    node    mean binary cross-entropy over every entry of the one-hot matrix
    edge    mean squared distance error plus a cosine direction penalty
    energy  mean squared error on normalized energies
    kl      closed-form divergence of the diagonal Gaussian posterior from
            the standard normal prior
    rdf     squared L2 gap between soft pair-distance histograms of
            predicted and true positions

``total_loss`` applies the weights and refuses non-finite parts so training
aborts loudly instead of drifting on NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .periodic_graph import GraphConfig, rdf_bin_centers

BCE_EPS = 1e-7

LOSS_TERMS = ("node", "edge", "energy", "kl", "rdf")


class TrainingDivergenceError(RuntimeError):
    """A loss term went non-finite; message names the offending term."""


@dataclass
class LossWeights:
    """Weights of the combined objective; defaults follow the reference recipe."""

    alpha_node: float = 1.0
    alpha_edge: float = 100.0
    alpha_energy: float = 300.0
    beta_kl: float = 1e-4
    alpha_rdf: float = 10.0
    lambda_cos: float = 1.0

    def __post_init__(self):
        values = (self.alpha_node, self.alpha_edge, self.alpha_energy,
                  self.beta_kl, self.alpha_rdf, self.lambda_cos)
        if any(v < 0.0 for v in values):
            raise ValueError(f"loss weights must be non-negative, got {values}")


@dataclass
class LossBreakdown:
    """Unweighted parts plus the weighted total, all scalar tensors."""

    node: Tensor
    edge: Tensor
    energy: Tensor
    kl: Tensor
    rdf: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "node": self.node.item(), "edge": self.edge.item(),
            "energy": self.energy.item(), "kl": self.kl.item(),
            "rdf": self.rdf.item(), "total": self.total.item(),
        }


def node_loss(node_probs, node_onehot) -> Tensor:
    """Mean BCE over all N*S entries, probabilities clamped away from {0, 1}."""
    probs = as_tensor(node_probs)
    target = as_tensor(node_onehot)
    if probs.shape != target.shape:
        raise ValueError(f"node shapes differ: {probs.shape} vs {target.shape}")
    p = ad.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    bce = ad.neg(ad.add(ad.mul(target, ad.log(p)),
                        ad.mul(1.0 - target, ad.log(1.0 - p))))
    return ad.tmean(bce)


def edge_loss(delta_hat, dist_hat, delta_true, dist_true, lambda_cos: float = 1.0) -> Tensor:
    """Mean over edges of (d_hat - d)^2 + lambda * (1 - cos(delta_hat, delta)).

    Zero-length direction vectors are treated as orthogonal by the epsilon
    guard inside the cosine.
    """
    dh, dt = as_tensor(dist_hat), as_tensor(dist_true)
    vh, vt = as_tensor(delta_hat), as_tensor(delta_true)
    if dh.shape != dt.shape or vh.shape != vt.shape:
        raise ValueError(
            f"edge shapes differ: dist {dh.shape} vs {dt.shape}, delta {vh.shape} vs {vt.shape}"
        )
    sq = ad.power(ad.sub(dh, dt), 2.0)
    direction = 1.0 - ad.cosine_similarity(vh, vt)
    return ad.add(ad.tmean(sq), lambda_cos * ad.tmean(direction))


def energy_loss(e_hat_norm, e_true_norm) -> Tensor:
    """Mean squared error over a batch of normalized energies."""
    pred, true = as_tensor(e_hat_norm), as_tensor(e_true_norm)
    if pred.shape != true.shape:
        raise ValueError(f"energy shapes differ: {pred.shape} vs {true.shape}")
    return ad.tmean(ad.power(ad.sub(pred, true), 2.0))


def kl_loss(mu, log_var) -> Tensor:
    """-1/2 sum_k (1 + log var_k - mu_k^2 - var_k), the diagonal-Gaussian form."""
    m, lv = as_tensor(mu), as_tensor(log_var)
    if m.shape != lv.shape:
        raise ValueError(f"kl shapes differ: {m.shape} vs {lv.shape}")
    inner = ad.sub(ad.add(1.0 + lv, ad.neg(ad.mul(m, m))), ad.exp(lv))
    return -0.5 * ad.tsum(inner)


def soft_rdf_histogram(positions: Tensor, box: np.ndarray, r_max: float,
                       bins: int, kernel_width: float) -> Tensor:
    """Differentiable soft histogram of minimum-image pair distances.

    Mirrors the numpy soft mode bin for bin: pairs farther than r_max are
    dropped (by current value), the rest spread softmax-normalized Gaussian
    weights over the bin centers.
    """
    box = np.asarray(box, dtype=np.float64)
    n = positions.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    disp = ad.periodic_delta(ad.sub(ad.index_gather(positions, iu),
                                    ad.index_gather(positions, ju)), box)
    dist = ad.l2_norm(disp, axis=1)
    keep = np.where((dist.data > 0.0) & (dist.data <= r_max))[0]
    centers = rdf_bin_centers(r_max, bins)
    if keep.size == 0:
        return Tensor(np.zeros(bins))
    d = ad.reshape(ad.index_gather(dist, keep), (keep.size, 1))
    logits = ad.mul(ad.power(ad.sub(d, Tensor(centers.reshape(1, bins))), 2.0),
                    Tensor(-1.0 / (2.0 * kernel_width * kernel_width)))
    weights = ad.softmax(logits, axis=1)
    return ad.reshape(ad.tsum(weights, axis=0), (bins,))


def rdf_loss(positions_hat, positions_true: np.ndarray, box: np.ndarray,
             rdf_config: GraphConfig, hist_true: np.ndarray | None = None) -> Tensor:
    """Squared L2 distance between the soft histograms of both position sets.

    ``hist_true`` may carry a precomputed soft histogram of the true
    positions (they are constant across epochs) to skip recomputing it.
    """
    box = np.asarray(box, dtype=np.float64)
    r_max = rdf_config.rdf_r_max if rdf_config.rdf_r_max is not None else float(np.min(box)) / 2.0
    if r_max <= 0.0 or r_max > float(np.min(box)) / 2.0:
        raise ValueError(f"r_max must lie in (0, {np.min(box) / 2.0}], got {r_max}")
    bins = rdf_config.rdf_bins
    width = r_max / bins
    sigma = rdf_config.rdf_kernel_width if rdf_config.rdf_kernel_width is not None else width

    pred = as_tensor(positions_hat)
    true = np.asarray(positions_true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"position shapes differ: {pred.shape} vs {true.shape}")

    hist_hat = soft_rdf_histogram(pred, box, r_max, bins, sigma)
    if hist_true is None:
        hist_true = soft_rdf_histogram(Tensor(true), box, r_max, bins, sigma).data
    return ad.tsum(ad.power(ad.sub(hist_hat, Tensor(hist_true)), 2.0))


def total_loss(parts: Mapping[str, Tensor | float], weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the five parts; raises on any non-finite term."""
    missing = [t for t in LOSS_TERMS if t not in parts]
    if missing:
        raise ValueError(f"missing loss terms: {missing}")
    tensors: dict[str, Tensor] = {}
    for term in LOSS_TERMS:
        t = as_tensor(parts[term])
        if not np.all(np.isfinite(t.data)):
            raise TrainingDivergenceError(f"loss term '{term}' is non-finite")
        tensors[term] = t
    total = (weights.alpha_node * tensors["node"]
             + weights.alpha_edge * tensors["edge"]
             + weights.alpha_energy * tensors["energy"]
             + weights.beta_kl * tensors["kl"]
             + weights.alpha_rdf * tensors["rdf"])
    return LossBreakdown(total=total, **tensors)
