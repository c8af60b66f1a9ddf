"""Command-line pipeline driver.

Commands:
    prepare          dumps + energy CSV + species map -> dataset JSONL
    train            dataset -> checkpoint + loss log
    eval             dataset + checkpoint -> metrics JSON + parity/RDF CSVs
    generate         checkpoint + anchor frame -> structures JSONL + summary
    check-invariance property and gradient checks on random fixtures

Configuration comes from an optional JSON file (--config) with explicit
flags taking precedence. Every run writes its manifest (resolved settings,
seed, tool version) into the output directory before any artifact, so a run
can be reproduced from the manifest alone.

Exit codes: 0 success, 2 usage/config errors, 3 numerical failures,
4 I/O failures. Set GLASSVAE_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import generator as gen
from . import losses as L
from . import metrics as M
from . import model as mdl
from . import periodic_graph as pg
from . import synthetic
from . import trainer as tr
from . import trajio
from .autodiff import Tensor

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _configure_logging() -> None:
    level_name = os.environ.get("GLASSVAE_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    return raw


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (flags set to None are unset)."""
    resolved = dict(defaults)
    resolved.update(_load_config_file(getattr(args, "config", None)))
    for key in defaults:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": resolved.get("seed"),
        "out_dir": str(out_dir),
        "resolved_config": resolved,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

PREPARE_DEFAULTS = {"ratio": 0.8, "seed": 0, "max_frames_per_temp": None}


def cmd_prepare(args: argparse.Namespace) -> int:
    resolved = _resolve(args, PREPARE_DEFAULTS)
    out_dir = Path(args.out)
    _write_manifest(out_dir, "prepare", args, resolved)

    with open(args.species_map) as fh:
        species_map = trajio.read_species_map(fh)

    configs: list[trajio.AtomicConfiguration] = []
    for spec in args.dump:
        temp_text, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--dump expects TEMP=PATH, got {spec!r}")
        with open(path) as fh:
            configs.extend(trajio.parse_dump(fh, species_map, temperature_tag=float(temp_text)))

    ids = [c.frame_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ValueError(
            "duplicate frame ids across dump files; ids must be globally unique "
            "so energies can be joined unambiguously"
        )

    with open(args.energies) as fh:
        table = trajio.read_energy_csv(fh)
    trajio.join_energies(configs, table)

    dataset = trajio.split_dataset(
        configs,
        ratio=resolved["ratio"],
        seed=resolved["seed"],
        max_frames_per_temp=resolved["max_frames_per_temp"],
    )
    dataset_path = out_dir / "dataset.jsonl"
    trajio.save_dataset(dataset, dataset_path)

    per_temp: dict[float, int] = {}
    for c in dataset.configs:
        per_temp[c.temperature_tag] = per_temp.get(c.temperature_tag, 0) + 1
    print(f"dataset: {len(dataset.configs)} frames -> {dataset_path}")
    for temp in sorted(per_temp):
        print(f"  {temp:g} K: {per_temp[temp]} frames")
    print(f"split: {len(dataset.train_ids)} train / {len(dataset.test_ids)} test")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "epochs": 100, "batch_size": 64, "learning_rate": 1e-3, "clip_norm": 1.0,
    "seed": 0, "checkpoint_every": 50,
    "hidden_dim": 32, "latent_dim": 16, "mp_layers": 2, "edge_blocks": 2,
    "pooling": "mean", "cutoff": 5.0, "rdf_bins": 64,
    "alpha_node": 1.0, "alpha_edge": 100.0, "alpha_energy": 300.0,
    "beta_kl": 1e-4, "alpha_rdf": 10.0, "lambda_cos": 1.0,
}


def _graph_config(resolved: dict) -> pg.GraphConfig:
    return pg.GraphConfig(cutoff=resolved["cutoff"], rdf_bins=resolved["rdf_bins"])


def cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    out_dir = Path(args.out)
    _write_manifest(out_dir, "train", args, resolved)

    dataset = trajio.load_dataset(args.dataset)
    species = trajio.species_order(dataset.configs)
    train_config = tr.TrainConfig(
        epochs=resolved["epochs"], batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"], clip_norm=resolved["clip_norm"],
        seed=resolved["seed"], checkpoint_every=resolved["checkpoint_every"],
    )
    weights = L.LossWeights(
        alpha_node=resolved["alpha_node"], alpha_edge=resolved["alpha_edge"],
        alpha_energy=resolved["alpha_energy"], beta_kl=resolved["beta_kl"],
        alpha_rdf=resolved["alpha_rdf"], lambda_cos=resolved["lambda_cos"],
    )

    resume = None
    if args.resume is not None:
        params, extras = mdl.load_checkpoint(args.resume)
        adam, epoch = tr.adam_state_from_extras(params, extras)
        resume = (params, adam, epoch)
        model_config = params.config
        print(f"resuming from {args.resume} at epoch {epoch} (adam step {adam.step})")
    else:
        model_config = mdl.ModelConfig(
            hidden_dim=resolved["hidden_dim"], latent_dim=resolved["latent_dim"],
            n_mp_layers=resolved["mp_layers"], n_edge_blocks=resolved["edge_blocks"],
            species_count=len(species), pooling=resolved["pooling"],
            seed=resolved["seed"],
        )

    params, log = tr.train(
        dataset, model_config, train_config, weights=weights,
        graph_config=_graph_config(resolved),
        checkpoint_dir=out_dir / "checkpoints", resume=resume,
    )
    final_epoch = int(log[-1]["epoch"]) + 1 if log else 0
    final_path = out_dir / "checkpoint.npz"
    adam_extras = {"epoch": np.array(final_epoch)}
    mdl.save_checkpoint(final_path, params, extras=adam_extras)
    tr.write_loss_log(log, out_dir / "training_log.csv")
    print(f"checkpoint: {final_path}")
    print(f"loss log: {out_dir / 'training_log.csv'} ({len(log)} epochs)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {"cutoff": 5.0, "rdf_bins": 64, "split": "test", "seed": 0}


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = _resolve(args, EVAL_DEFAULTS)
    out_dir = Path(args.out)
    _write_manifest(out_dir, "eval", args, resolved)

    dataset = trajio.load_dataset(args.dataset)
    params, _ = mdl.load_checkpoint(args.checkpoint)
    graph_config = _graph_config(resolved)

    preds = tr.collect_predictions(dataset, params, split=resolved["split"], graph_config=graph_config)
    report = M.MetricsReport(
        energy_rmse=M.rmse(preds.energy_pred, preds.energy_true),
        energy_r2=M.r2(preds.energy_pred, preds.energy_true),
        dist_rmse=M.rmse(preds.dist_pred, preds.dist_true),
        dist_r2=M.r2(preds.dist_pred, preds.dist_true),
        node_bce=float(np.mean(preds.node_bces)),
        n_samples=len(preds.frame_ids),
    )
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    M.parity_export(preds.energy_pred, preds.energy_true, out_dir / "parity_energy.csv")
    M.parity_export(preds.dist_pred, preds.dist_true, out_dir / "parity_distance.csv")

    by_id = {c.frame_id: c for c in dataset.configs}
    first = preds.frame_ids[0]
    M.rdf_compare(by_id[first], preds.positions_pred[0], graph_config,
                  csv_path=out_dir / "rdf_compare.csv")

    rows = gen.export_latents(params, dataset, graph_config)
    gen.write_latents_csv(rows, out_dir / "latents.csv")

    for key, value in report.as_dict().items():
        print(f"{key}: {value}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "mode": "random", "gamma": 0.5, "n_samples": 10, "steps": 200,
    "refine_lr": 1e-2, "latent_reg": 1e-3, "seed": 0,
    "e_min": None, "e_max": None, "cutoff": 5.0, "rdf_bins": 64,
}


def cmd_generate(args: argparse.Namespace) -> int:
    resolved = _resolve(args, GENERATE_DEFAULTS)
    out_dir = Path(args.out)
    _write_manifest(out_dir, "generate", args, resolved)

    dataset = trajio.load_dataset(args.dataset)
    params, _ = mdl.load_checkpoint(args.checkpoint)
    species = trajio.species_order(dataset.configs)
    graph_config = _graph_config(resolved)

    by_id = {c.frame_id: c for c in dataset.configs}
    if args.anchor_frame not in by_id:
        raise ValueError(f"anchor frame {args.anchor_frame} not in dataset")
    anchor = pg.build_graph(by_id[args.anchor_frame], graph_config.cutoff,
                            dataset.energy_norm, species=species)

    gen_config = gen.GenConfig(
        gamma=resolved["gamma"], n_samples=resolved["n_samples"],
        e_min=resolved["e_min"], e_max=resolved["e_max"],
        latent_reg=resolved["latent_reg"], steps=resolved["steps"],
        refine_lr=resolved["refine_lr"], seed=resolved["seed"],
        prior_mode=bool(args.prior),
    )
    rng = np.random.default_rng(gen_config.seed)

    structures: list[trajio.AtomicConfiguration] = []
    summary: list[tuple[int, float, bool]] = []
    if resolved["mode"] == "random":
        outputs = gen.sample_random(params, anchor, gen_config, rng)
        for k, recon in enumerate(outputs):
            config = gen.reconstruction_to_config(
                recon, anchor, dataset.energy_norm, frame_id=k)
            structures.append(config)
            summary.append((k, config.energy, True))
    elif resolved["mode"] == "conditional":
        code = mdl.encode(anchor, params, rng=None)
        sigma = np.exp(0.5 * code.log_var.data)
        for k in range(gen_config.n_samples):
            z0 = code.mu.data + sigma * (gen_config.gamma * rng.standard_normal(sigma.shape))
            result = gen.generate_conditional(params, anchor, gen_config,
                                              dataset.energy_norm, z_init=z0)
            config = gen.reconstruction_to_config(
                result.reconstruction, anchor, dataset.energy_norm, frame_id=k)
            structures.append(config)
            summary.append((k, result.energy_ev, result.in_target))
    else:
        raise ValueError(f"mode must be 'random' or 'conditional', got {resolved['mode']!r}")

    trajio.write_configs_jsonl(structures, out_dir / "structures.jsonl")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        fh.write("sample_id,energy_ev,in_target\n")
        for sid, energy, ok in summary:
            fh.write(f"{sid},{energy!r},{int(ok)}\n")
    n_in = sum(1 for _, _, ok in summary if ok)
    print(f"wrote {len(structures)} structures -> {out_dir / 'structures.jsonl'}")
    if resolved["mode"] == "conditional":
        print(f"in-target: {n_in}/{len(summary)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-invariance
# ---------------------------------------------------------------------------

CHECK_DEFAULTS = {"seed": 0, "n_configs": 20, "cutoff": 4.0}


def _check_invariance(seed: int, n_configs: int, cutoff: float) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    config = mdl.ModelConfig(hidden_dim=16, latent_dim=16, n_mp_layers=2,
                             n_edge_blocks=1, species_count=2, seed=seed)
    params = mdl.init_params(config)
    results: list[tuple[str, bool, str]] = []

    perm_worst = trans_worst = rot_worst = 0.0
    for k in range(n_configs):
        n_atoms = int(rng.integers(16, 33))
        snap = synthetic.random_configuration(n_atoms, 10.0, rng, frame_id=k)
        graph = pg.build_graph(snap, cutoff)
        code = mdl.encode(graph, params, rng=None)

        perm = rng.permutation(n_atoms)
        permuted = trajio.AtomicConfiguration(
            positions=snap.positions[perm], species=[snap.species[p] for p in perm],
            box=snap.box, energy=None, temperature_tag=0.0, frame_id=k)
        code_p = mdl.encode(pg.build_graph(permuted, cutoff), params, rng=None)
        for a, b in ((code.mu, code_p.mu), (code.log_var, code_p.log_var),
                     (code.edge_descriptor, code_p.edge_descriptor)):
            perm_worst = max(perm_worst, ad.relative_error(a.data, b.data))

        shift = rng.uniform(-20.0, 20.0, size=3)
        translated = trajio.AtomicConfiguration(
            positions=trajio.wrap_positions(snap.positions + shift, snap.box),
            species=list(snap.species), box=snap.box, energy=None,
            temperature_tag=0.0, frame_id=k)
        code_t = mdl.encode(pg.build_graph(translated, cutoff), params, rng=None)
        trans_worst = max(trans_worst, ad.relative_error(code.mu.data, code_t.mu.data))

        # rotation in a free cell: distances must be preserved
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        centered = snap.positions - snap.positions.mean(axis=0)
        big_box = np.array([1000.0] * 3)
        base = centered + 500.0
        rotated = centered @ q.T + 500.0
        iu, ju = np.triu_indices(n_atoms, k=1)
        for pair in zip(iu, ju):
            _, d0 = pg.min_image_displacement(base[pair[0]], base[pair[1]], big_box)
            _, d1 = pg.min_image_displacement(rotated[pair[0]], rotated[pair[1]], big_box)
            rot_worst = max(rot_worst, abs(d0 - d1) / max(d0, 1e-30))

    results.append(("encoder permutation invariance", perm_worst < 1e-6,
                    f"worst rel err {perm_worst:.3e} (tol 1e-6, seed={seed})"))
    results.append(("encoder translation invariance", trans_worst < 1e-12,
                    f"worst rel err {trans_worst:.3e} (tol 1e-12, seed={seed})"))
    results.append(("rotation distance invariance", rot_worst < 1e-12,
                    f"worst rel err {rot_worst:.3e} (tol 1e-12, seed={seed})"))

    # gradient spot-checks against central differences
    snap = synthetic.random_configuration(8, 10.0, rng, frame_id=999)
    graph = pg.build_graph(snap, cutoff)
    rdf_config = pg.GraphConfig(cutoff=cutoff, rdf_bins=16)

    def pipeline_loss(trial: mdl.ModelParams) -> Tensor:
        # fresh generator per call so the noise draw is identical every time
        code, recon = mdl.reconstruct(graph, trial, np.random.default_rng(1234))
        parts = {
            "node": L.node_loss(recon.node_probs, Tensor(graph.node_features)),
            "edge": L.edge_loss(recon.edge_delta_hat, recon.edge_dist_hat,
                                Tensor(graph.edge_deltas), Tensor(graph.edge_dists)),
            "energy": L.energy_loss(recon.energy_hat, Tensor(50.0)),
            "kl": L.kl_loss(code.mu, code.log_var),
            "rdf": L.rdf_loss(recon.positions_hat, graph.reference_positions,
                              graph.box, rdf_config),
        }
        return L.total_loss(parts, L.LossWeights()).total

    grad_worst = 0.0
    for name in ("mu_head.w", "dec_pos.w2", "energy.w0"):
        trial = params.copy()
        trial.zero_grad()
        ad.backward(pipeline_loss(trial))

        def loss_at(values: np.ndarray, pname: str = name) -> float:
            probe = params.copy()
            probe[pname].data[...] = values
            return pipeline_loss(probe).item()

        fd = ad.central_difference(loss_at, trial[name].data.copy())
        grad_worst = max(grad_worst, ad.relative_error(trial[name].grad, fd, floor=1e-8))
    results.append(("parameter gradients vs finite differences", grad_worst < 1e-4,
                    f"worst rel err {grad_worst:.3e} (tol 1e-4, seed={seed})"))
    return results


def cmd_check_invariance(args: argparse.Namespace) -> int:
    resolved = _resolve(args, CHECK_DEFAULTS)
    results = _check_invariance(resolved["seed"], resolved["n_configs"], resolved["cutoff"])
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        print(f"failed checks: {', '.join(failed)}")
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glassvae", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset from dumps and an energy table")
    p.add_argument("--dump", action="append", required=True, metavar="TEMP=PATH",
                   help="dump file with its temperature tag; repeatable")
    p.add_argument("--energies", required=True, help="CSV of frame_id,energy_eV")
    p.add_argument("--species-map", required=True, help="file of TYPE=LABEL lines")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-frames-per-temp", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--mp-layers", type=int)
    p.add_argument("--edge-blocks", type=int)
    p.add_argument("--pooling", choices=("mean", "sum"))
    p.add_argument("--cutoff", type=float)
    p.add_argument("--rdf-bins", type=int)
    p.add_argument("--alpha-node", type=float)
    p.add_argument("--alpha-edge", type=float)
    p.add_argument("--alpha-energy", type=float)
    p.add_argument("--beta-kl", type=float)
    p.add_argument("--alpha-rdf", type=float)
    p.add_argument("--lambda-cos", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics and export CSVs for a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--cutoff", type=float)
    p.add_argument("--rdf-bins", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample structures from a trained model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--anchor-frame", type=int, required=True)
    p.add_argument("--mode", choices=("random", "conditional"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--e-min", type=float, help="target lower bound, total eV")
    p.add_argument("--e-max", type=float, help="target upper bound, total eV")
    p.add_argument("--steps", type=int)
    p.add_argument("--refine-lr", type=float)
    p.add_argument("--latent-reg", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--prior", action="store_true",
                   help="random mode: draw z from the standard normal prior")
    p.add_argument("--cutoff", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("check-invariance", help="run property and gradient checks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-configs", type=int)
    p.add_argument("--cutoff", type=float)
    p.set_defaults(func=cmd_check_invariance)

    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (L.TrainingDivergenceError, gen.RefinementDivergenceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
