"""Random and energy-conditioned structure generation from a trained model.

Both modes are anchored: an explicit anchor graph supplies the template
(node count, edge index, reference positions) and the posterior statistics.
Random mode perturbs the anchor's posterior mean with scaled noise; a pure
prior mode (z ~ N(0, I)) sits behind ``prior_mode`` for completeness.

Conditional mode runs gradient descent on the latent code against the hinge
objective  max(E_min - E(z), 0)^2 + max(E(z) - E_max, 0)^2 + reg * |z|^2,
with a backtracking step size so the recorded objective trace never
increases. The energy read uses the same head as ``predict_energy`` with the
anchor's edge descriptor held fixed, so there is a single energy code path.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    LatentCode,
    ModelParams,
    ReconstructionOutput,
    decode,
    encode,
    energy_from_latent,
)
from .periodic_graph import ConfigGraph, GraphConfig, build_graph
from .trajio import AtomicConfiguration, Dataset, EnergyNormalizer, species_order, wrap_positions

logger = logging.getLogger(__name__)


class RefinementDivergenceError(RuntimeError):
    """Conditional refinement hit a non-finite objective; message has the step."""


@dataclass
class GenConfig:
    gamma: float = 0.5          # posterior noise scale for random mode
    n_samples: int = 1
    e_min: float | None = None  # eV, conditional target interval
    e_max: float | None = None
    latent_reg: float = 1e-3
    steps: int = 200
    refine_lr: float = 1e-2
    seed: int = 0
    prior_mode: bool = False    # draw z ~ N(0, I) instead of around the anchor

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.e_min is not None and self.e_max is not None and self.e_min > self.e_max:
            raise ValueError(f"e_min {self.e_min} exceeds e_max {self.e_max}")


def sample_random(
    params: ModelParams,
    anchor_graph: ConfigGraph,
    gen_config: GenConfig,
    rng: np.random.Generator,
) -> list[ReconstructionOutput]:
    """Decode n_samples codes drawn around the anchor's posterior mean.

    z = mu + sigma * (gamma * eps) with eps ~ N(0, I); gamma = 0 reduces every
    sample to the deterministic decode of mu. Each output carries the energy
    head's prediction for its own code.
    """
    if gen_config.gamma < 0.0:
        raise ValueError(f"gamma must be non-negative, got {gen_config.gamma}")
    code = encode(anchor_graph, params, rng=None)
    mu = code.mu.data
    sigma = np.exp(0.5 * code.log_var.data)
    outputs: list[ReconstructionOutput] = []
    for _ in range(gen_config.n_samples):
        eps = rng.standard_normal(mu.shape)
        if gen_config.prior_mode:
            z = eps
        else:
            z = mu + sigma * (gen_config.gamma * eps)
        sample_code = LatentCode(
            mu=code.mu, log_var=code.log_var, z=Tensor(z),
            edge_descriptor=code.edge_descriptor, eps=eps,
        )
        recon = decode(sample_code, anchor_graph, params)
        recon.energy_hat = energy_from_latent(sample_code.z, code.edge_descriptor, params)
        outputs.append(recon)
    return outputs


@dataclass
class ConditionalResult:
    z_star: np.ndarray
    reconstruction: ReconstructionOutput
    energy_norm: float
    energy_ev: float
    in_target: bool
    objective_trace: list[float] = field(default_factory=list)
    steps_taken: int = 0


def generate_conditional(
    params: ModelParams,
    anchor_graph: ConfigGraph,
    gen_config: GenConfig,
    normalizer: EnergyNormalizer,
    z_init: np.ndarray | None = None,
) -> ConditionalResult:
    """Refine a latent code until the predicted energy lands inside
    [e_min, e_max] (targets given in eV and mapped through the normalizer).

    The code starts at the anchor's posterior mean unless ``z_init`` says
    otherwise. Descent is plain gradient steps with backtracking: a step that
    would raise the objective is retried at half the rate, so the recorded
    objective trace is non-increasing. The step size grows gently again after
    accepted steps.
    """
    if gen_config.e_min is None or gen_config.e_max is None:
        raise ValueError("conditional generation needs both e_min and e_max")
    lo = normalizer.normalize(gen_config.e_min)
    hi = normalizer.normalize(gen_config.e_max)

    code = encode(anchor_graph, params, rng=None)
    descriptor = Tensor(code.edge_descriptor.data.copy())
    if z_init is not None:
        z = np.asarray(z_init, dtype=np.float64).reshape(code.mu.shape).copy()
    else:
        z = code.mu.data.copy()

    def objective(z_value: np.ndarray) -> tuple[float, np.ndarray, float]:
        z_var = Tensor(z_value.copy(), requires_grad=True)
        e_hat = energy_from_latent(z_var, descriptor, params)
        low_gap = ad.power(ad.relu(lo - e_hat), 2.0)
        high_gap = ad.power(ad.relu(e_hat - hi), 2.0)
        reg = gen_config.latent_reg * ad.tsum(ad.mul(z_var, z_var))
        total = ad.add(ad.add(low_gap, high_gap), reg)
        ad.backward(total)
        return total.item(), z_var.grad.copy(), e_hat.item()

    value, grad, energy = objective(z)
    if not np.isfinite(value):
        raise RefinementDivergenceError("objective non-finite at step 0")
    trace = [value]
    lr = gen_config.refine_lr
    max_lr = gen_config.refine_lr * 100.0
    steps_taken = 0

    # the hinge gradient fades quadratically at the interval boundary, so an
    # active regularizer can hold the equilibrium slightly outside; remember
    # the best iterate that actually satisfied the constraint
    best_feasible: tuple[float, np.ndarray] | None = None
    if lo <= energy <= hi:
        best_feasible = (value, z.copy())

    for step in range(1, gen_config.steps + 1):
        accepted = False
        trial_lr = lr
        for _ in range(40):
            candidate = z - trial_lr * grad
            cand_value, cand_grad, cand_energy = objective(candidate)
            if not np.isfinite(cand_value):
                raise RefinementDivergenceError(f"objective non-finite at step {step}")
            if cand_value <= value:
                z, value, grad, energy = candidate, cand_value, cand_grad, cand_energy
                lr = min(trial_lr * 1.3, max_lr)
                accepted = True
                break
            trial_lr *= 0.5
        if not accepted:
            logger.debug("refinement stalled at step %d (no descent direction)", step)
            break
        trace.append(value)
        steps_taken = step
        if lo <= energy <= hi and (best_feasible is None or value < best_feasible[0]):
            best_feasible = (value, z.copy())

    if best_feasible is not None and not lo <= energy <= hi:
        z = best_feasible[1]
    z_star = z.copy()
    final_code = LatentCode(
        mu=code.mu, log_var=code.log_var, z=Tensor(z_star),
        edge_descriptor=code.edge_descriptor, eps=np.zeros_like(z_star),
    )
    recon = decode(final_code, anchor_graph, params)
    recon.energy_hat = energy_from_latent(final_code.z, code.edge_descriptor, params)
    energy_norm_value = recon.energy_hat.item()
    return ConditionalResult(
        z_star=z_star,
        reconstruction=recon,
        energy_norm=energy_norm_value,
        energy_ev=normalizer.denormalize(energy_norm_value),
        in_target=bool(lo <= energy_norm_value <= hi),
        objective_trace=trace,
        steps_taken=steps_taken,
    )


def export_latents(
    params: ModelParams,
    dataset: Dataset,
    graph_config: GraphConfig | None = None,
) -> list[tuple[int, np.ndarray, float]]:
    """Posterior-mean embedding and energy for every frame, for projection."""
    graph_config = graph_config or GraphConfig()
    species = species_order(dataset.configs)
    rows = []
    for config in dataset.configs:
        graph = build_graph(config, graph_config.cutoff, dataset.energy_norm, species=species)
        code = encode(graph, params, rng=None)
        rows.append((config.frame_id, code.mu.data.reshape(-1).copy(), float(config.energy)))
    return rows


def write_latents_csv(rows: list[tuple[int, np.ndarray, float]], path) -> None:
    if not rows:
        raise ValueError("no latent rows to write")
    dim = rows[0][1].size
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id"] + [f"mu_{k}" for k in range(dim)] + ["energy_ev"])
        for frame_id, mu, energy in rows:
            writer.writerow([frame_id] + [repr(float(x)) for x in mu] + [repr(energy)])


def reconstruction_to_config(
    recon: ReconstructionOutput,
    template: ConfigGraph,
    normalizer: EnergyNormalizer | None = None,
    frame_id: int = 0,
    temperature_tag: float = 0.0,
) -> AtomicConfiguration:
    """Materialize a decoded sample as a configuration (positions wrapped,
    species by row-wise argmax, energy denormalized when a head value and
    normalizer are available)."""
    species_idx = np.argmax(recon.node_probs.data, axis=1)
    labels = [template.species[k] for k in species_idx]
    energy = None
    if recon.energy_hat is not None and normalizer is not None:
        energy = normalizer.denormalize(recon.energy_hat.item())
    return AtomicConfiguration(
        positions=wrap_positions(recon.positions_hat.data, template.box),
        species=labels,
        box=template.box.copy(),
        energy=energy,
        temperature_tag=temperature_tag,
        frame_id=frame_id,
    )
