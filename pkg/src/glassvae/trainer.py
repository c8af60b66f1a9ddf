"""Mini-batch training with Adam and global-norm gradient clipping.

The loop is deterministic for a fixed seed: parameter init derives from the
model seed, while shuffling and reparameterization noise derive from the
train seed through independent child generators. Rerunning the same configs
reproduces checkpoints bit for bit.

A non-finite loss aborts the run with the path of the last good checkpoint
(when checkpointing is enabled) instead of training onward on garbage.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .losses import LossWeights, TrainingDivergenceError
from .metrics import MetricsReport, rmse, r2
from .model import (
    ModelConfig,
    ModelParams,
    init_params,
    reconstruct,
    save_checkpoint,
)
from .periodic_graph import ConfigGraph, GraphConfig, build_graph
from .trajio import Dataset, species_order

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "node", "edge", "energy", "kl", "rdf", "total")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 50
    plateau_epochs: int | None = None  # optional early stop on loss plateau

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        for name, beta in (("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)):
            if not 0.0 < beta < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {beta}")


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            step=0,
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _batch_parts(
    graphs: list[ConfigGraph],
    params: ModelParams,
    weights: LossWeights,
    graph_config: GraphConfig,
    noise_rng: np.random.Generator,
    rdf_cache: dict[int, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """Per-term batch means over one mini-batch of graphs."""
    collected: dict[str, list[Tensor]] = {term: [] for term in L.LOSS_TERMS}
    for g in graphs:
        code, recon = reconstruct(g, params, noise_rng)
        collected["node"].append(L.node_loss(recon.node_probs, Tensor(g.node_features)))
        collected["edge"].append(L.edge_loss(
            recon.edge_delta_hat, recon.edge_dist_hat,
            Tensor(g.edge_deltas), Tensor(g.edge_dists),
            lambda_cos=weights.lambda_cos,
        ))
        collected["energy"].append(L.energy_loss(recon.energy_hat, Tensor(g.energy_norm)))
        collected["kl"].append(L.kl_loss(code.mu, code.log_var))
        hist_true = rdf_cache.get(id(g)) if rdf_cache is not None else None
        collected["rdf"].append(L.rdf_loss(
            recon.positions_hat, g.reference_positions, g.box, graph_config,
            hist_true=hist_true,
        ))
    parts: dict[str, Tensor] = {}
    for term, values in collected.items():
        stacked = ad.concat([ad.reshape(v, (1,)) for v in values], axis=0)
        parts[term] = ad.tmean(stacked)
    return parts


def build_training_graphs(dataset: Dataset, graph_config: GraphConfig,
                          split: str = "train") -> list[ConfigGraph]:
    configs = dataset.train_configs if split == "train" else dataset.test_configs
    species = species_order(dataset.configs)
    return [
        build_graph(c, graph_config.cutoff, dataset.energy_norm, species=species)
        for c in configs
    ]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights | None = None,
    graph_config: GraphConfig | None = None,
    checkpoint_dir=None,
    resume: tuple[ModelParams, AdamState, int] | None = None,
) -> tuple[ModelParams, list[dict[str, float]]]:
    """Run the training loop and return final parameters plus the epoch log.

    Each epoch shuffles the train graphs, and each batch runs
    encode -> decode -> energy head -> weighted loss -> backward -> clip ->
    Adam. The log holds one row per epoch with the batch-averaged parts.
    """
    weights = weights or LossWeights()
    graph_config = graph_config or GraphConfig()
    graphs = build_training_graphs(dataset, graph_config, split="train")
    if not graphs:
        raise ValueError("dataset has no training graphs")
    if any(g.energy_norm is None for g in graphs):
        raise ValueError("training graphs need normalized energies")

    if resume is not None:
        params, adam, start_epoch = resume
    else:
        params, adam, start_epoch = init_params(model_config), None, 0
        adam = AdamState.for_params(params)

    shuffle_seq, noise_seq = np.random.SeedSequence(train_config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)

    # the true-position histograms are constant across epochs
    rdf_cache: dict[int, np.ndarray] = {}
    for g in graphs:
        r_max = (graph_config.rdf_r_max if graph_config.rdf_r_max is not None
                 else float(np.min(g.box)) / 2.0)
        width = r_max / graph_config.rdf_bins
        sigma = (graph_config.rdf_kernel_width
                 if graph_config.rdf_kernel_width is not None else width)
        rdf_cache[id(g)] = L.soft_rdf_histogram(
            Tensor(g.reference_positions), g.box, r_max, graph_config.rdf_bins, sigma
        ).data

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good: Path | None = None

    log: list[dict[str, float]] = []
    report_every = max(1, train_config.epochs // 20)
    recent: list[float] = []

    for epoch in range(start_epoch, start_epoch + train_config.epochs):
        order = shuffle_rng.permutation(len(graphs))
        epoch_sums = {term: 0.0 for term in LOG_COLUMNS if term != "epoch"}
        n_batches = 0
        for lo in range(0, len(order), train_config.batch_size):
            batch = [graphs[k] for k in order[lo:lo + train_config.batch_size]]
            params.zero_grad()
            try:
                parts = _batch_parts(batch, params, weights, graph_config, noise_rng,
                                     rdf_cache=rdf_cache)
                breakdown = L.total_loss(parts, weights)
            except TrainingDivergenceError as err:
                raise TrainingDivergenceError(
                    f"{err} (epoch {epoch}, last good checkpoint: {last_good})"
                ) from err
            ad.backward(breakdown.total)

            names = params.names()
            grads = [params[n].grad for n in names]
            clipped, _ = ad.clip_global_norm(grads, train_config.clip_norm)
            adam_step(
                params, dict(zip(names, clipped)), adam,
                lr=train_config.learning_rate,
                betas=(train_config.adam_beta1, train_config.adam_beta2),
                eps=train_config.adam_eps,
            )
            for term, value in breakdown.floats().items():
                epoch_sums[term] += value
            n_batches += 1

        row = {"epoch": float(epoch)}
        row.update({term: epoch_sums[term] / n_batches for term in epoch_sums})
        log.append(row)

        if (epoch - start_epoch) % report_every == 0 or epoch == start_epoch + train_config.epochs - 1:
            print(f"epoch {epoch}: total={row['total']:.6g} energy={row['energy']:.6g} "
                  f"edge={row['edge']:.6g} node={row['node']:.6g}")

        if ckpt_dir is not None and (
            (epoch + 1) % train_config.checkpoint_every == 0
            or epoch == start_epoch + train_config.epochs - 1
        ):
            last_good = ckpt_dir / f"checkpoint_epoch{epoch:05d}.npz"
            save_checkpoint(last_good, params, extras=_adam_extras(adam, epoch + 1))

        if train_config.plateau_epochs is not None:
            recent.append(row["total"])
            window = train_config.plateau_epochs
            if len(recent) > window and min(recent[-window:]) >= min(recent[:-window]):
                logger.info("stopping early: no improvement over %d epochs", window)
                break

    return params, log


def _adam_extras(adam: AdamState, epoch: int) -> dict[str, np.ndarray]:
    extras = {"adam_step": np.array(adam.step), "epoch": np.array(epoch)}
    for name, buf in adam.m.items():
        extras[f"adam_m/{name}"] = buf
    for name, buf in adam.v.items():
        extras[f"adam_v/{name}"] = buf
    return extras


def adam_state_from_extras(params: ModelParams, extras: dict[str, np.ndarray]) -> tuple[AdamState, int]:
    """Rebuild optimizer state saved by :func:`train`'s checkpoints."""
    state = AdamState.for_params(params)
    if "adam_step" in extras:
        state.step = int(extras["adam_step"])
        for name in params.names():
            state.m[name] = extras[f"adam_m/{name}"].copy()
            state.v[name] = extras[f"adam_v/{name}"].copy()
    epoch = int(extras.get("epoch", 0))
    return state, epoch


def write_loss_log(log: list[dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow([int(row["epoch"])] + [repr(row[c]) for c in LOG_COLUMNS[1:]])


@dataclass
class PredictionSet:
    """Per-split deterministic model outputs, the raw material for metrics."""

    energy_true: np.ndarray       # eV/atom
    energy_pred: np.ndarray       # eV/atom
    dist_true: np.ndarray         # pooled over every edge in the split
    dist_pred: np.ndarray
    node_bces: np.ndarray         # per graph
    positions_pred: list[np.ndarray]
    frame_ids: list[int]


def collect_predictions(
    dataset: Dataset,
    params: ModelParams,
    split: str = "test",
    graph_config: GraphConfig | None = None,
) -> PredictionSet:
    """Run the model deterministically (z = mu) over one split."""
    graph_config = graph_config or GraphConfig()
    graphs = build_training_graphs(dataset, graph_config, split=split)
    if not graphs:
        raise ValueError(f"split {split!r} is empty")
    norm = dataset.energy_norm

    e_true, e_pred = [], []
    d_true, d_pred = [], []
    bce_values, positions, frame_ids = [], [], []
    for g in graphs:
        code, recon = reconstruct(g, params, rng=None)
        n = g.n_nodes
        e_true.append(norm.denormalize(g.energy_norm) / n)
        e_pred.append(norm.denormalize(recon.energy_hat.item()) / n)
        d_true.append(g.edge_dists)
        d_pred.append(recon.edge_dist_hat.data)
        bce_values.append(L.node_loss(recon.node_probs, Tensor(g.node_features)).item())
        positions.append(recon.positions_hat.data.copy())
        frame_ids.append(g.frame_id)

    return PredictionSet(
        energy_true=np.array(e_true),
        energy_pred=np.array(e_pred),
        dist_true=np.concatenate(d_true),
        dist_pred=np.concatenate(d_pred),
        node_bces=np.array(bce_values),
        positions_pred=positions,
        frame_ids=frame_ids,
    )


def evaluate(
    dataset: Dataset,
    params: ModelParams,
    split: str = "test",
    graph_config: GraphConfig | None = None,
) -> MetricsReport:
    """Deterministic metrics on one split; parameters are never mutated.

    Energies are denormalized and divided by the atom count (eV/atom);
    distance metrics pool the edges of every graph in the split.
    """
    preds = collect_predictions(dataset, params, split, graph_config)
    return MetricsReport(
        energy_rmse=rmse(preds.energy_pred, preds.energy_true),
        energy_r2=r2(preds.energy_pred, preds.energy_true),
        dist_rmse=rmse(preds.dist_pred, preds.dist_true),
        dist_r2=r2(preds.dist_pred, preds.dist_true),
        node_bce=float(np.mean(preds.node_bces)),
        n_samples=len(preds.frame_ids),
    )
