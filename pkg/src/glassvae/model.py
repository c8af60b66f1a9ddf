"""Dual-path graph encoder, reparameterized sampling, and decoder heads.

The node path embeds one-hot species, runs message-passing rounds where each
node averages messages built from its neighbors' embeddings and the edge
attributes, pools the node states, and projects to the posterior mean and
log-variance. The edge path refines raw edge attributes through residual
blocks and pools them into a global edge descriptor. The energy head reads
the posterior mean concatenated with the edge descriptor, never the sampled
code, so its output is deterministic given an encoding.

Decoding is anchored on a template graph: reference positions give each node
an identity, the latent vector is broadcast to every node/edge and combined
with that anchor. With all-zero decoder weights the predicted positions equal
the template reference exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .periodic_graph import ConfigGraph

CHECKPOINT_VERSION = 1


class DegenerateGraphError(ValueError):
    """Graph has no edges; mean aggregation over edges is undefined."""


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    latent_dim: int = 16
    n_mp_layers: int = 2
    n_edge_blocks: int = 2
    species_count: int = 2
    edge_attr_dim: int = 4
    energy_head_dims: tuple[int, ...] = (32,)
    pooling: str = "mean"  # {"mean", "sum"}
    seed: int = 0

    def __post_init__(self):
        self.energy_head_dims = tuple(self.energy_head_dims)
        dims = (self.hidden_dim, self.latent_dim, self.n_mp_layers,
                self.n_edge_blocks, self.species_count, self.edge_attr_dim,
                *self.energy_head_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")
        if not 8 <= self.latent_dim <= 64:
            raise ValueError(f"latent_dim must lie in [8, 64], got {self.latent_dim}")
        if not 16 <= self.latent_dim <= 32:
            warnings.warn(
                f"latent_dim {self.latent_dim} is outside the well-behaved 16-32 range",
                stacklevel=2,
            )
        if self.pooling not in ("mean", "sum"):
            raise ValueError(f"pooling must be 'mean' or 'sum', got {self.pooling!r}")


@dataclass
class LatentCode:
    """Posterior parameters, the sampled code, and the edge descriptor.

    All row vectors: mu/log_var/z are (1, latent_dim), edge_descriptor is
    (1, hidden_dim). eps is the noise actually used, so
    z = mu + exp(0.5 log_var) * eps holds for the recorded draw.
    """

    mu: Tensor
    log_var: Tensor
    z: Tensor
    edge_descriptor: Tensor
    eps: np.ndarray


@dataclass
class ReconstructionOutput:
    node_probs: Tensor                  # (N, S), rows on the simplex
    edge_delta_hat: Tensor              # (E, 3)
    edge_dist_hat: Tensor               # (E,)
    positions_hat: Tensor               # (N, 3)
    energy_hat: Tensor | None = None   # normalized scalar, set by the energy head


class ModelParams:
    """Named parameter tensors in a fixed order, with save/load support."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        clone = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self._tensors.items()}
        return ModelParams(self.config, clone)


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, z = config.hidden_dim, config.latent_dim
    s, a = config.species_count, config.edge_attr_dim
    shapes: dict[str, tuple[int, ...]] = {
        "node_embed.w": (s, h), "node_embed.b": (h,),
    }
    for layer in range(config.n_mp_layers):
        shapes[f"mp{layer}.msg.w1"] = (h + a, h)
        shapes[f"mp{layer}.msg.b1"] = (h,)
        shapes[f"mp{layer}.msg.w2"] = (h, h)
        shapes[f"mp{layer}.msg.b2"] = (h,)
        shapes[f"mp{layer}.upd.w1"] = (2 * h, h)
        shapes[f"mp{layer}.upd.b1"] = (h,)
        shapes[f"mp{layer}.upd.w2"] = (h, h)
        shapes[f"mp{layer}.upd.b2"] = (h,)
    shapes.update({
        "mu_head.w": (h, z), "mu_head.b": (z,),
        "logvar_head.w": (h, z), "logvar_head.b": (z,),
        "edge_embed.w": (a, h), "edge_embed.b": (h,),
    })
    for layer in range(config.n_edge_blocks):
        shapes[f"edge_block{layer}.w1"] = (h, h)
        shapes[f"edge_block{layer}.b1"] = (h,)
        shapes[f"edge_block{layer}.w2"] = (h, h)
        shapes[f"edge_block{layer}.b2"] = (h,)
    # node/position heads read [z, periodic anchor features]; the edge head
    # reads [z, decoded displacement]
    for head, in_dim, out_dim in (("dec_node", z + 6, s), ("dec_pos", z + 6, 3),
                                  ("dec_edge", z + 3, a)):
        shapes[f"{head}.w1"] = (in_dim, h)
        shapes[f"{head}.b1"] = (h,)
        shapes[f"{head}.w2"] = (h, out_dim)
        shapes[f"{head}.b2"] = (out_dim,)
    widths = (z + h, *config.energy_head_dims, 1)
    for k in range(len(widths) - 1):
        shapes[f"energy.w{k}"] = (widths[k], widths[k + 1])
        shapes[f"energy.b{k}"] = (widths[k + 1],)
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-scaled normal weights, zero biases, seeded by the config."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            data = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


_linear = ad.linear


def _mlp2(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = ad.silu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _pool(rows: Tensor, mode: str) -> Tensor:
    if mode == "sum":
        return ad.tsum(rows, axis=0, keepdims=True)
    return ad.tmean(rows, axis=0, keepdims=True)


def _broadcast_rows(row: Tensor, n: int) -> Tensor:
    return ad.mul(Tensor(np.ones((n, 1))), row)


def encode(graph: ConfigGraph, params: ModelParams, rng: np.random.Generator | None) -> LatentCode:
    """Run both encoder paths and sample the latent code.

    ``rng`` drives the reparameterization noise; pass None for the
    deterministic code z = mu (eps = 0).
    """
    if graph.n_edges == 0:
        raise DegenerateGraphError(
            f"frame {graph.frame_id}: graph has no edges; encoder aggregation is undefined"
        )
    config = params.config
    src = graph.edge_index[:, 0]
    nbr = graph.edge_index[:, 1]
    edge_feats = Tensor(graph.edge_features())

    h = ad.silu(_linear(Tensor(graph.node_features), params["node_embed.w"], params["node_embed.b"]))
    for layer in range(config.n_mp_layers):
        neighbor_states = ad.index_gather(h, nbr)
        messages = _mlp2(ad.concat([neighbor_states, edge_feats], axis=1), params, f"mp{layer}.msg")
        pooled = ad.segment_mean(messages, src, graph.n_nodes)
        h = ad.add(h, _mlp2(ad.concat([h, pooled], axis=1), params, f"mp{layer}.upd"))

    graph_vec = _pool(h, config.pooling)
    mu = _linear(graph_vec, params["mu_head.w"], params["mu_head.b"])
    log_var = _linear(graph_vec, params["logvar_head.w"], params["logvar_head.b"])

    e = ad.silu(_linear(edge_feats, params["edge_embed.w"], params["edge_embed.b"]))
    for layer in range(config.n_edge_blocks):
        e = ad.add(e, _mlp2(e, params, f"edge_block{layer}"))
    edge_descriptor = _pool(e, config.pooling)

    if rng is None:
        eps = np.zeros((1, config.latent_dim))
    else:
        eps = rng.standard_normal((1, config.latent_dim))
    z = ad.add(mu, ad.mul(ad.exp(ad.mul(log_var, Tensor(0.5))), Tensor(eps)))
    return LatentCode(mu=mu, log_var=log_var, z=z, edge_descriptor=edge_descriptor, eps=eps)


def _anchor_features(positions: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Periodic encoding of reference positions: sin/cos of fractional coords.

    Smooth across the box boundary, unlike raw fractional coordinates, which
    matters because wrapped anchors sit arbitrarily close to both edges.
    """
    frac = 2.0 * np.pi * positions / box
    return np.concatenate([np.sin(frac), np.cos(frac)], axis=1)


def decode(code: LatentCode, template: ConfigGraph, params: ModelParams) -> ReconstructionOutput:
    """Reconstruct species, positions, and edge attributes on the template."""
    config = params.config
    if code.z.shape != (1, config.latent_dim):
        raise ValueError(
            f"latent shape {code.z.shape} does not match model latent_dim {config.latent_dim}"
        )
    n = template.n_nodes
    box = template.box
    anchor = Tensor(_anchor_features(template.reference_positions, box))

    z_nodes = _broadcast_rows(code.z, n)
    node_in = ad.concat([z_nodes, anchor], axis=1)
    node_probs = ad.softmax(_mlp2(node_in, params, "dec_node"), axis=1)
    positions_hat = ad.add(Tensor(template.reference_positions), _mlp2(node_in, params, "dec_pos"))

    i_idx = template.edge_index[:, 0]
    j_idx = template.edge_index[:, 1]
    raw_disp = ad.sub(ad.index_gather(positions_hat, j_idx), ad.index_gather(positions_hat, i_idx))
    disp = ad.periodic_delta(raw_disp, box)
    z_edges = _broadcast_rows(code.z, template.n_edges)
    edge_out = _mlp2(ad.concat([z_edges, disp], axis=1), params, "dec_edge")
    edge_delta_hat = ad.slice_cols(edge_out, 0, 3)
    edge_dist_hat = ad.reshape(ad.slice_cols(edge_out, 3, 4), (template.n_edges,))

    return ReconstructionOutput(
        node_probs=node_probs,
        edge_delta_hat=edge_delta_hat,
        edge_dist_hat=edge_dist_hat,
        positions_hat=positions_hat,
    )


def energy_from_latent(latent_row: Tensor, edge_descriptor: Tensor, params: ModelParams) -> Tensor:
    """Scalar normalized energy from a graph-level code and edge descriptor."""
    x = ad.concat([latent_row, edge_descriptor], axis=1)
    n_layers = len(params.config.energy_head_dims) + 1
    for k in range(n_layers):
        x = _linear(x, params[f"energy.w{k}"], params[f"energy.b{k}"])
        if k < n_layers - 1:
            x = ad.silu(x)
    return ad.reshape(x, ())


def predict_energy(code: LatentCode, params: ModelParams) -> Tensor:
    """Normalized energy from the posterior mean (not the sampled z)."""
    return energy_from_latent(code.mu, code.edge_descriptor, params)


def reconstruct(
    graph: ConfigGraph, params: ModelParams, rng: np.random.Generator | None
) -> tuple[LatentCode, ReconstructionOutput]:
    """encode -> decode -> predict_energy on one graph (template = input)."""
    code = encode(graph, params, rng)
    recon = decode(code, graph, params)
    recon.energy_hat = predict_energy(code, params)
    return code, recon


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, extras: dict[str, np.ndarray] | None = None) -> None:
    """Write config + parameters (and optional extra arrays) to an .npz file."""
    arrays: dict[str, np.ndarray] = {f"param/{k}": v.data for k, v in params.items()}
    if extras:
        for k, v in extras.items():
            arrays[f"extra/{k}"] = np.asarray(v)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config)}
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Read a checkpoint back; parameter arrays round-trip bit-exactly."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"][()]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        raw = meta["config"]
        raw["energy_head_dims"] = tuple(raw["energy_head_dims"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # config already validated when saved
            config = ModelConfig(**raw)
        tensors: dict[str, Tensor] = {}
        extras: dict[str, np.ndarray] = {}
        for key in data.files:
            if key.startswith("param/"):
                tensors[key[len("param/"):]] = Tensor(data[key].copy(), requires_grad=True)
            elif key.startswith("extra/"):
                extras[key[len("extra/"):]] = data[key].copy()
    expected = _param_shapes(config)
    ordered: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tensors[name].shape != shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
        ordered[name] = tensors[name]
    return ModelParams(config, ordered), extras
