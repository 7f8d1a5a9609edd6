"""Dataset generation, on-disk layout, and training-sample assembly.

Layout written by generate/save:

    <root>/manifest.json
    <root>/maps/<id>/buildings.pgm
    <root>/maps/<id>/cars.pgm
    <root>/maps/<id>/tx.json                  (scene sidecar, all tx)
    <root>/maps/<id>/gain_<fidelity>_t<j>.pgm (one per tx and fidelity)
    <root>/maps/<id>/samples_refined_t<j>.json

The manifest records every seed, per-file sha256 checksums, and pixel
statistics so a regenerated dataset can be verified byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grids, simulator
from .grids import Scene, SceneParams
from .linkbudget import LinkBudget
from .simulator import FIDELITY_KINDS, REFINED, Fidelity
from .training import Sample, SparseSamples, sample_measurements


@dataclass(frozen=True)
class DatasetConfig:
    seed: int
    n_maps: int = 20
    tx_per_map: int = 2
    size: int = 64
    scene: SceneParams = SceneParams()
    fidelities: tuple[str, ...] = FIDELITY_KINDS
    wall_db_per_pixel: float = 2.0
    car_db_per_pixel: float = 1.0
    bend_penalty_db: float = 15.0
    corner_candidate_stride: int = 2
    refined_sample_count: int = 100
    refined_sample_seed: int = 1

    def fidelity(self, kind: str) -> Fidelity:
        return Fidelity(kind=kind,
                        wall_db_per_pixel=self.wall_db_per_pixel,
                        car_db_per_pixel=self.car_db_per_pixel,
                        bend_penalty_db=self.bend_penalty_db,
                        corner_candidate_stride=self.corner_candidate_stride)


@dataclass
class MapRecord:
    scene: Scene                                   # tx set to the first tx
    tx_list: list[tuple[int, int]]
    gains: dict[str, list[np.ndarray]]             # fidelity -> per-tx maps
    refined_samples: list[SparseSamples] = field(default_factory=list)


@dataclass
class RadioDataset:
    config: DatasetConfig
    lb: LinkBudget
    maps: dict[int, MapRecord]

    @property
    def map_ids(self) -> list[int]:
        return sorted(self.maps)

    def scene_for(self, map_id: int, tx_index: int) -> Scene:
        rec = self.maps[map_id]
        return rec.scene.with_tx(rec.tx_list[tx_index])


def generate_dataset(cfg: DatasetConfig, lb: LinkBudget | None = None,
                     progress=None) -> RadioDataset:
    """Simulate all maps and fidelities. Per-map seeds are seed + map_id,
    so generation order (or parallel generation) cannot change results."""
    lb = lb or LinkBudget()
    fids = [cfg.fidelity(k) for k in cfg.fidelities]
    maps: dict[int, MapRecord] = {}
    for map_id in range(cfg.n_maps):
        map_seed = cfg.seed + map_id
        scene = grids.random_scene(map_seed, cfg.size, cfg.scene)
        tx_list = grids.draw_tx_locations(scene.buildings, cfg.tx_per_map,
                                          seed=map_seed + 10_000)
        gains: dict[str, list[np.ndarray]] = {k: [] for k in cfg.fidelities}
        refined: list[SparseSamples] = []
        for j, tx in enumerate(tx_list):
            placed = scene.with_tx(tx)
            out = simulator.simulate_many(placed, fids, lb)
            for k in cfg.fidelities:
                gains[k].append(out[k])
            if REFINED in out and cfg.refined_sample_count > 0:
                refined.append(sample_measurements(
                    out[REFINED], placed, cfg.refined_sample_count,
                    seed=cfg.refined_sample_seed + 131 * map_seed + j))
        maps[map_id] = MapRecord(scene.with_tx(tx_list[0]), tx_list, gains, refined)
        if progress:
            progress(map_id)
    return RadioDataset(cfg, lb, maps)


# --- persistence -----------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: RadioDataset, root) -> dict:
    """Write the directory layout and manifest; returns the manifest."""
    root = Path(root)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    entries = {}
    for map_id, rec in ds.maps.items():
        d = root / "maps" / str(map_id)
        d.mkdir(parents=True, exist_ok=True)
        grids.save_pgm(rec.scene.buildings.astype(float), d / "buildings.pgm")
        grids.save_pgm(rec.scene.cars.astype(float), d / "cars.pgm")
        grids.save_sidecar(rec.scene, rec.tx_list, d / "tx.json")
        files = ["buildings.pgm", "cars.pgm", "tx.json"]
        for k, gain_list in rec.gains.items():
            for j, gain in enumerate(gain_list):
                name = f"gain_{k}_t{j}.pgm"
                grids.save_pgm(gain, d / name)
                files.append(name)
        for j, sp in enumerate(rec.refined_samples):
            name = f"samples_refined_t{j}.json"
            (d / name).write_text(json.dumps(sp.to_dict()))
            files.append(name)
        entries[str(map_id)] = {
            "files": {f: _sha256(d / f) for f in sorted(files)},
            "building_pixels": int(rec.scene.buildings.sum()),
            "car_pixels": int(rec.scene.cars.sum()),
            "tx_count": len(rec.tx_list),
        }
    manifest = {
        "config": {
            "seed": ds.config.seed,
            "n_maps": ds.config.n_maps,
            "tx_per_map": ds.config.tx_per_map,
            "size": ds.config.size,
            "scene": {
                "building_count": ds.config.scene.building_count,
                "building_size_range": list(ds.config.scene.building_size_range),
                "car_count": ds.config.scene.car_count,
                "margin": ds.config.scene.margin,
                "street_width": ds.config.scene.street_width,
            },
            "fidelities": list(ds.config.fidelities),
            "wall_db_per_pixel": ds.config.wall_db_per_pixel,
            "car_db_per_pixel": ds.config.car_db_per_pixel,
            "bend_penalty_db": ds.config.bend_penalty_db,
            "corner_candidate_stride": ds.config.corner_candidate_stride,
            "refined_sample_count": ds.config.refined_sample_count,
            "refined_sample_seed": ds.config.refined_sample_seed,
        },
        "linkbudget": ds.lb.to_dict(),
        "maps": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _config_from_manifest(m: dict) -> DatasetConfig:
    c = m["config"]
    sp = c["scene"]
    return DatasetConfig(
        seed=c["seed"], n_maps=c["n_maps"], tx_per_map=c["tx_per_map"],
        size=c["size"],
        scene=SceneParams(sp["building_count"], tuple(sp["building_size_range"]),
                          sp["car_count"], sp["margin"], sp["street_width"]),
        fidelities=tuple(c["fidelities"]),
        wall_db_per_pixel=c["wall_db_per_pixel"],
        car_db_per_pixel=c["car_db_per_pixel"],
        bend_penalty_db=c["bend_penalty_db"],
        corner_candidate_stride=c["corner_candidate_stride"],
        refined_sample_count=c["refined_sample_count"],
        refined_sample_seed=c["refined_sample_seed"],
    )


def load_dataset(root) -> RadioDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root} has no manifest.json; not a dataset")
    manifest = json.loads(manifest_path.read_text())
    cfg = _config_from_manifest(manifest)
    lb = LinkBudget.from_dict(manifest["linkbudget"])
    maps: dict[int, MapRecord] = {}
    for map_id_str, entry in manifest["maps"].items():
        map_id = int(map_id_str)
        d = root / "maps" / map_id_str
        buildings = (grids.load_pgm(d / "buildings.pgm") > 0.5).astype(np.uint8)
        cars = (grids.load_pgm(d / "cars.pgm") > 0.5).astype(np.uint8)
        sidecar = grids.load_sidecar(d / "tx.json")
        tx_list = [tuple(t) for t in sidecar["tx"]]
        scene = Scene(buildings, cars, tx_list[0], seed=sidecar.get("seed"),
                      rects=[tuple(r) for r in sidecar.get("rects", [])])
        gains: dict[str, list[np.ndarray]] = {}
        for k in cfg.fidelities:
            gains[k] = [grids.load_pgm(d / f"gain_{k}_t{j}.pgm")
                        for j in range(entry["tx_count"])]
        refined = []
        for j in range(entry["tx_count"]):
            p = d / f"samples_refined_t{j}.json"
            if p.exists():
                refined.append(SparseSamples.from_dict(json.loads(p.read_text())))
        maps[map_id] = MapRecord(scene, tx_list, gains, refined)
    return RadioDataset(cfg, lb, maps)


def verify_manifest(root) -> list[str]:
    """Re-hash every file; returns a list of mismatch descriptions."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    problems = []
    for map_id, entry in manifest["maps"].items():
        d = root / "maps" / map_id
        for fname, digest in entry["files"].items():
            p = d / fname
            if not p.exists():
                problems.append(f"{p}: missing")
            elif _sha256(p) != digest:
                problems.append(f"{p}: checksum mismatch")
    return problems


# --- training-sample assembly ------------------------------------------------

@dataclass(frozen=True)
class ChannelConfig:
    """Which channels feed the estimator.

    Channel order: buildings, tx one-hot, [cars], [measurements].
    k_min/k_max give the per-sample measurement count range (inclusive);
    counts and locations are drawn once per sample and fixed for the run.
    """

    use_cars: bool = True
    use_samples: bool = False
    k_min: int = 1
    k_max: int = 50
    sample_seed: int = 0

    @property
    def channel_count(self) -> int:
        return 2 + int(self.use_cars) + int(self.use_samples)


def build_input_stack(scene: Scene, channels: ChannelConfig,
                      measurements: SparseSamples | None = None) -> np.ndarray:
    layers = [scene.buildings.astype(np.float64), grids.tx_onehot(scene)]
    if channels.use_cars:
        layers.append(scene.cars.astype(np.float64))
    if channels.use_samples:
        if measurements is None:
            raise ValueError("channel config wants measurements but none given")
        layers.append(measurements.to_channel(scene.shape))
    return np.stack(layers)


def assemble_samples(ds: RadioDataset, map_ids, target_fidelities,
                     channels: ChannelConfig,
                     measurement_source: str | None = None) -> list[Sample]:
    """Build (input stack, dense target) pairs for the given maps.

    target_fidelities: either one fidelity name for all samples or a dict
    (map_id, tx_index) -> name. measurement_source names the fidelity the
    measurement channel reads from (defaults to the target)."""
    out = []
    for map_id in map_ids:
        rec = ds.maps[map_id]
        for j in range(len(rec.tx_list)):
            if isinstance(target_fidelities, str):
                fid = target_fidelities
            else:
                fid = target_fidelities[(map_id, j)]
            target = rec.gains[fid][j]
            scene = ds.scene_for(map_id, j)
            meas = None
            if channels.use_samples:
                src = measurement_source or fid
                src_gain = rec.gains[src][j]
                rng_seed = channels.sample_seed + 7919 * map_id + j
                k = int(np.random.default_rng(rng_seed).integers(
                    channels.k_min, channels.k_max + 1))
                meas = sample_measurements(src_gain, scene, k, seed=rng_seed + 1)
            out.append(Sample(build_input_stack(scene, channels, meas), target,
                              map_id=map_id, tx_index=j))
    return out


def assemble_sparse_samples(ds: RadioDataset, map_ids, channels: ChannelConfig) -> list[Sample]:
    """Adaptation samples: targets are the refined maps but the loss only
    sees the stored sparse measurement pixels (per-pixel weights 1/K)."""
    out = []
    for map_id in map_ids:
        rec = ds.maps[map_id]
        if not rec.refined_samples:
            raise ValueError(f"map {map_id} has no refined sparse samples")
        for j in range(len(rec.tx_list)):
            scene = ds.scene_for(map_id, j)
            sp = rec.refined_samples[j]
            target = sp.to_channel(scene.shape)
            weights = sp.to_weights(scene.shape)
            out.append(Sample(build_input_stack(scene, channels, None), target,
                              weights=weights, map_id=map_id, tx_index=j))
    return out
