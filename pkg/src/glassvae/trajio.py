"""Trajectory ingestion: dump parsing, energy joining, normalization, splits.

Supported inputs
----------------
- Text dumps with ``ITEM:`` headers (TIMESTEP / NUMBER OF ATOMS / BOX BOUNDS /
  ATOMS with at least id, type, x, y, z columns). Orthorhombic boxes only;
  tilt factors raise ``UnsupportedFormatError``.
- Energy tables as two-column CSV ``frame_id,energy_eV`` (header optional).
- Species maps as ``key=value`` lines, e.g. ``1=Cu``.

Frames are keyed by their TIMESTEP value; energy joining is by that id, never
by file position. Coordinates are shifted to the box origin and wrapped into
[0, L) on ingestion so downstream minimum-image math sees its precondition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

import numpy as np


class ParseError(ValueError):
    """Malformed dump content; message carries the 1-based line number."""


class StructuralError(ParseError):
    """Frame structure inconsistent with its own header (e.g. atom count)."""


class UnsupportedFormatError(ParseError):
    """Recognized but unsupported input (triclinic boxes, missing columns)."""


class MissingFrameError(KeyError):
    """Energy table lacks entries for one or more frame ids."""


@dataclass
class AtomicConfiguration:
    """One snapshot: wrapped positions, species labels, box lengths, energy."""

    positions: np.ndarray            # (N, 3) angstrom, in [0, L)
    species: list[str]               # length N
    box: np.ndarray                  # (3,) edge lengths, angstrom
    energy: float | None = None     # total potential energy, eV
    temperature_tag: float = 0.0     # kelvin, metadata only
    frame_id: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.box = np.asarray(self.box, dtype=np.float64)
        n = self.positions.shape[0]
        if n < 2:
            raise ValueError(f"configuration needs at least 2 atoms, got {n}")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if self.box.shape != (3,) or np.any(self.box <= 0.0):
            raise ValueError(f"box must be 3 positive edge lengths, got {self.box}")
        if len(self.species) != n:
            raise ValueError(f"{len(self.species)} species labels for {n} atoms")

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]


def wrap_positions(positions: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Wrap coordinates into [0, L) per axis."""
    box = np.asarray(box, dtype=np.float64)
    wrapped = np.mod(np.asarray(positions, dtype=np.float64), box)
    # mod can return L itself when the argument is a tiny negative number
    return np.where(wrapped >= box, wrapped - box, wrapped)


# ---------------------------------------------------------------------------
# dump parsing
# ---------------------------------------------------------------------------

def _fail(lineno: int, message: str) -> None:
    raise ParseError(f"line {lineno}: {message}")


def parse_dump(
    stream: TextIO | Iterable[str],
    species_map: Mapping[int, str] | None = None,
    temperature_tag: float = 0.0,
) -> list[AtomicConfiguration]:
    """Parse a text dump into one AtomicConfiguration per frame.

    Parameters
    ----------
    stream : text file object or iterable of lines
    species_map : optional mapping from integer atom type to species label;
        without it the label is the type integer as a string.
    temperature_tag : kelvin tag stored on every parsed frame.

    Atoms are reordered by id within each frame. Box lengths are hi - lo per
    axis and positions are shifted by lo and wrapped into [0, L). Energies
    are left unset; see :func:`join_energies`.
    """
    lines = list(stream)
    configs: list[AtomicConfiguration] = []
    i = 0
    n_lines = len(lines)

    def expect(index: int, what: str) -> str:
        if index >= n_lines:
            _fail(n_lines, f"unexpected end of file, expected {what}")
        return lines[index]

    while i < n_lines:
        if not lines[i].strip():
            i += 1
            continue
        if not lines[i].startswith("ITEM: TIMESTEP"):
            _fail(i + 1, f"expected 'ITEM: TIMESTEP', got {lines[i].strip()!r}")
        try:
            frame_id = int(expect(i + 1, "timestep value").strip())
        except ValueError:
            _fail(i + 2, "timestep value is not an integer")
        if not expect(i + 2, "'ITEM: NUMBER OF ATOMS'").startswith("ITEM: NUMBER OF ATOMS"):
            _fail(i + 3, "expected 'ITEM: NUMBER OF ATOMS'")
        try:
            n_atoms = int(expect(i + 3, "atom count").strip())
        except ValueError:
            _fail(i + 4, "atom count is not an integer")

        bounds_line = expect(i + 4, "'ITEM: BOX BOUNDS'")
        if not bounds_line.startswith("ITEM: BOX BOUNDS"):
            _fail(i + 5, "expected 'ITEM: BOX BOUNDS'")
        if any(t in bounds_line.split() for t in ("xy", "xz", "yz")):
            raise UnsupportedFormatError(
                f"line {i + 5}: triclinic box (tilt factors) is not supported"
            )
        lo = np.zeros(3)
        hi = np.zeros(3)
        for axis in range(3):
            parts = expect(i + 5 + axis, "box bounds").split()
            if len(parts) < 2:
                _fail(i + 6 + axis, "box bounds need 'lo hi'")
            if len(parts) > 2:
                raise UnsupportedFormatError(
                    f"line {i + 6 + axis}: extra box bound columns suggest tilt factors"
                )
            lo[axis], hi[axis] = float(parts[0]), float(parts[1])

        atoms_header = expect(i + 8, "'ITEM: ATOMS'")
        if not atoms_header.startswith("ITEM: ATOMS"):
            _fail(i + 9, "expected 'ITEM: ATOMS'")
        columns = atoms_header.split()[2:]
        try:
            col = {name: columns.index(name) for name in ("id", "type", "x", "y", "z")}
        except ValueError as err:
            raise UnsupportedFormatError(
                f"line {i + 9}: ATOMS columns {columns} lack one of id/type/x/y/z"
            ) from err

        body_start = i + 9
        rows: list[tuple[int, int, float, float, float]] = []
        for k in range(n_atoms):
            lineno = body_start + k
            if lineno >= n_lines or lines[lineno].startswith("ITEM:"):
                raise StructuralError(
                    f"line {lineno + 1}: frame {frame_id} declares {n_atoms} atoms "
                    f"but only {k} rows are present"
                )
            parts = lines[lineno].split()
            if len(parts) < len(columns):
                _fail(lineno + 1, f"atom row has {len(parts)} fields, expected {len(columns)}")
            try:
                rows.append((
                    int(parts[col["id"]]),
                    int(parts[col["type"]]),
                    float(parts[col["x"]]),
                    float(parts[col["y"]]),
                    float(parts[col["z"]]),
                ))
            except ValueError:
                _fail(lineno + 1, "atom row has non-numeric id/type/coordinates")
        i = body_start + n_atoms

        rows.sort(key=lambda r: r[0])
        ids = [r[0] for r in rows]
        if len(set(ids)) != n_atoms:
            raise StructuralError(f"frame {frame_id}: duplicate atom ids")
        positions = np.array([[r[2], r[3], r[4]] for r in rows]) - lo
        box = hi - lo
        labels = []
        for r in rows:
            if species_map is None:
                labels.append(str(r[1]))
            elif r[1] in species_map:
                labels.append(species_map[r[1]])
            else:
                raise ParseError(
                    f"frame {frame_id}: atom type {r[1]} missing from species map"
                )
        configs.append(AtomicConfiguration(
            positions=wrap_positions(positions, box),
            species=labels,
            box=box,
            energy=None,
            temperature_tag=temperature_tag,
            frame_id=frame_id,
        ))
    return configs


def join_energies(
    configs: list[AtomicConfiguration],
    energy_table: Mapping[int, float],
) -> list[AtomicConfiguration]:
    """Fill each config's energy from a frame_id -> eV table (match by id)."""
    missing = sorted(c.frame_id for c in configs if c.frame_id not in energy_table)
    if missing:
        raise MissingFrameError(f"energy table missing frame ids {missing}")
    for c in configs:
        c.energy = float(energy_table[c.frame_id])
    return configs


def read_energy_csv(stream: TextIO | Iterable[str]) -> dict[int, float]:
    """Read a two-column ``frame_id,energy_eV`` CSV; one header row allowed."""
    table: dict[int, float] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 2:
            raise ParseError(f"line {lineno}: energy CSV needs 'frame_id,energy_eV'")
        try:
            table[int(parts[0])] = float(parts[1])
        except ValueError:
            if lineno == 1:
                continue  # header row
            raise ParseError(f"line {lineno}: non-numeric energy CSV row") from None
    return table


def read_species_map(stream: TextIO | Iterable[str]) -> dict[int, str]:
    """Read ``type=label`` lines, e.g. ``1=Cu``; blank lines and # comments ok."""
    mapping: dict[int, str] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: species map lines look like '1=Cu'")
        key, _, value = line.partition("=")
        try:
            mapping[int(key.strip())] = value.strip()
        except ValueError:
            raise ParseError(f"line {lineno}: species map key must be an integer") from None
    return mapping


# ---------------------------------------------------------------------------
# normalization and splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyNormalizer:
    """Linear map sending [e_min, e_max] onto [lo, hi] (degenerate range -> lo)."""

    e_min: float
    e_max: float
    lo: float = 0.0
    hi: float = 100.0

    def normalize(self, e: float) -> float:
        if self.e_max == self.e_min:
            return self.lo
        return self.lo + (e - self.e_min) / (self.e_max - self.e_min) * (self.hi - self.lo)

    def denormalize(self, y: float) -> float:
        if self.e_max == self.e_min:
            return self.e_min
        return self.e_min + (y - self.lo) / (self.hi - self.lo) * (self.e_max - self.e_min)


def fit_normalizer(train_energies: Iterable[float]) -> EnergyNormalizer:
    energies = [float(e) for e in train_energies]
    if not energies:
        raise ValueError("cannot fit a normalizer on an empty energy list")
    return EnergyNormalizer(e_min=min(energies), e_max=max(energies))


@dataclass
class Dataset:
    """Configs plus their train/test assignment and the train-fitted normalizer."""

    configs: list[AtomicConfiguration]
    energy_norm: EnergyNormalizer
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.frame_id for c in self.configs]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique within a dataset")
        assigned = set(self.train_ids) | set(self.test_ids)
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test splits overlap")
        if assigned != set(ids):
            raise ValueError("split does not cover exactly the dataset frames")

    def _select(self, ids: list[int]) -> list[AtomicConfiguration]:
        by_id = {c.frame_id: c for c in self.configs}
        return [by_id[i] for i in ids]

    @property
    def train_configs(self) -> list[AtomicConfiguration]:
        return self._select(self.train_ids)

    @property
    def test_configs(self) -> list[AtomicConfiguration]:
        return self._select(self.test_ids)


def split_dataset(
    configs: list[AtomicConfiguration],
    ratio: float = 0.8,
    seed: int = 0,
    max_frames_per_temp: int | None = None,
) -> Dataset:
    """Stratified-by-temperature split; deterministic for a fixed seed.

    Each temperature stratum keeps the ratio to within one frame. The energy
    normalizer is fit on the train side only. ``max_frames_per_temp`` caps
    each stratum (random seeded subsample) before splitting.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    if len(configs) < 2:
        raise ValueError("need at least 2 configurations to split")
    if any(c.energy is None for c in configs):
        raise ValueError("all configurations need energies before splitting")

    rng = np.random.default_rng(seed)
    strata: dict[float, list[AtomicConfiguration]] = {}
    for c in configs:
        strata.setdefault(c.temperature_tag, []).append(c)

    kept: list[AtomicConfiguration] = []
    train_ids: list[int] = []
    test_ids: list[int] = []
    for tag in sorted(strata):
        members = sorted(strata[tag], key=lambda c: c.frame_id)
        if max_frames_per_temp is not None and len(members) > max_frames_per_temp:
            pick = rng.choice(len(members), size=max_frames_per_temp, replace=False)
            members = [members[k] for k in sorted(pick)]
        order = rng.permutation(len(members))
        n_train = int(round(ratio * len(members)))
        n_train = min(max(n_train, 1), len(members))
        for rank, k in enumerate(order):
            (train_ids if rank < n_train else test_ids).append(members[k].frame_id)
        kept.extend(members)

    train_set = set(train_ids)
    normalizer = fit_normalizer([c.energy for c in kept if c.frame_id in train_set])
    return Dataset(
        configs=kept,
        energy_norm=normalizer,
        train_ids=sorted(train_ids),
        test_ids=sorted(test_ids),
    )


# ---------------------------------------------------------------------------
# canonical JSON-lines serialization
# ---------------------------------------------------------------------------

def config_to_json(config: AtomicConfiguration) -> str:
    return json.dumps({
        "frame_id": config.frame_id,
        "temperature_tag": config.temperature_tag,
        "box": config.box.tolist(),
        "energy": config.energy,
        "species": list(config.species),
        "positions": config.positions.tolist(),
    })


def config_from_json(line: str) -> AtomicConfiguration:
    raw = json.loads(line)
    return AtomicConfiguration(
        positions=np.array(raw["positions"], dtype=np.float64),
        species=list(raw["species"]),
        box=np.array(raw["box"], dtype=np.float64),
        energy=raw["energy"],
        temperature_tag=float(raw["temperature_tag"]),
        frame_id=int(raw["frame_id"]),
    )


def write_configs_jsonl(configs: Iterable[AtomicConfiguration], path) -> None:
    with open(path, "w") as fh:
        for c in configs:
            fh.write(config_to_json(c) + "\n")


def read_configs_jsonl(path) -> list[AtomicConfiguration]:
    with open(path) as fh:
        return [config_from_json(line) for line in fh if line.strip()]


def save_dataset(dataset: Dataset, jsonl_path) -> None:
    """Write configs as JSONL plus a ``.meta.json`` sidecar with split/normalizer."""
    write_configs_jsonl(dataset.configs, jsonl_path)
    meta = {
        "version": 1,
        "train_ids": dataset.train_ids,
        "test_ids": dataset.test_ids,
        "energy_norm": {
            "e_min": dataset.energy_norm.e_min,
            "e_max": dataset.energy_norm.e_max,
            "lo": dataset.energy_norm.lo,
            "hi": dataset.energy_norm.hi,
        },
    }
    with open(_meta_path(jsonl_path), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_dataset(jsonl_path) -> Dataset:
    configs = read_configs_jsonl(jsonl_path)
    with open(_meta_path(jsonl_path)) as fh:
        meta = json.load(fh)
    norm = EnergyNormalizer(**meta["energy_norm"])
    return Dataset(
        configs=configs,
        energy_norm=norm,
        train_ids=list(meta["train_ids"]),
        test_ids=list(meta["test_ids"]),
    )


def _meta_path(jsonl_path) -> str:
    text = str(jsonl_path)
    if text.endswith(".jsonl"):
        return text[: -len(".jsonl")] + ".meta.json"
    return text + ".meta.json"


def species_order(configs: Iterable[AtomicConfiguration]) -> tuple[str, ...]:
    """Sorted distinct species labels; fixes the one-hot column order."""
    seen: set[str] = set()
    for c in configs:
        seen.update(c.species)
    return tuple(sorted(seen))
