"""Scene data model, procedural city generation, dataset splits, PGM I/O.

Grids are plain 2D numpy arrays, row major, one pixel per square meter.
Masks hold {0, 1}; radio maps hold gray levels in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SceneParams:
    """Knobs for the rectangular-city generator."""

    building_count: int = 8
    building_size_range: tuple[int, int] = (6, 14)
    car_count: int = 30
    margin: int = 2
    # free pixels within this Chebyshev distance of a building are "street"
    street_width: int = 3


@dataclass
class Scene:
    """Building mask, car mask, and one transmitter pixel.

    Masks are uint8 {0,1} arrays of equal shape; cars never overlap
    buildings and the transmitter is never inside a building.
    Generation metadata (seed, placed rectangles) rides along so dataset
    sidecars can be written and areas re-derived.
    """

    buildings: np.ndarray
    cars: np.ndarray
    tx: tuple[int, int]
    meters_per_pixel: float = 1.0
    seed: int | None = None
    rects: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.buildings.shape != self.cars.shape:
            raise ValueError("building and car masks must share a shape")
        r, c = self.tx
        h, w = self.buildings.shape
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"tx {self.tx} outside {h}x{w} grid")
        if self.buildings[r, c]:
            raise ValueError("tx pixel lies inside a building")
        if np.any(self.buildings.astype(bool) & self.cars.astype(bool)):
            raise ValueError("car mask overlaps building mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.buildings.shape

    def with_tx(self, tx: tuple[int, int]) -> "Scene":
        return Scene(self.buildings, self.cars, (int(tx[0]), int(tx[1])),
                     self.meters_per_pixel, self.seed, self.rects)


@dataclass(frozen=True)
class DatasetSplit:
    train_map_ids: tuple[int, ...]
    val_map_ids: tuple[int, ...]
    test_map_ids: tuple[int, ...]


def _street_mask(buildings: np.ndarray, width: int) -> np.ndarray:
    """Free pixels within Chebyshev distance `width` of any building."""
    dil = buildings.astype(bool).copy()
    cur = buildings.astype(bool)
    for _ in range(width):
        grown = cur.copy()
        grown[1:, :] |= cur[:-1, :]
        grown[:-1, :] |= cur[1:, :]
        grown[:, 1:] |= cur[:, :-1]
        grown[:, :-1] |= cur[:, 1:]
        grown[1:, 1:] |= cur[:-1, :-1]
        grown[1:, :-1] |= cur[:-1, 1:]
        grown[:-1, 1:] |= cur[1:, :-1]
        grown[:-1, :-1] |= cur[1:, 1:]
        cur = grown
        dil |= grown
    return dil & ~buildings.astype(bool)


def random_scene(seed: int, size: int, params: SceneParams = SceneParams()) -> Scene:
    """Deterministic axis-aligned rectangular city with cars along streets.

    Rectangles are rejection-sampled to be pairwise disjoint; cars land on
    free pixels near building walls; the transmitter is drawn uniformly
    from non-building pixels. Pure function of (seed, size, params).
    """
    if size < 16:
        raise ValueError("size must be at least 16")
    if params.building_count < 0:
        raise ValueError("building_count must be nonnegative")
    rng = np.random.default_rng(seed)
    buildings = np.zeros((size, size), dtype=np.uint8)
    lo, hi = params.building_size_range
    rects: list[tuple[int, int, int, int]] = []
    attempts = 0
    max_attempts = 60 * max(params.building_count, 1)
    while len(rects) < params.building_count and attempts < max_attempts:
        attempts += 1
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        rmax = size - params.margin - h
        cmax = size - params.margin - w
        if rmax < params.margin or cmax < params.margin:
            continue
        r0 = int(rng.integers(params.margin, rmax + 1))
        c0 = int(rng.integers(params.margin, cmax + 1))
        if np.any(buildings[r0:r0 + h, c0:c0 + w]):
            continue
        buildings[r0:r0 + h, c0:c0 + w] = 1
        rects.append((r0, c0, h, w))

    cars = np.zeros_like(buildings)
    street = _street_mask(buildings, params.street_width)
    street_idx = np.flatnonzero(street)
    n_cars = min(params.car_count, street_idx.size)
    if n_cars > 0:
        chosen = rng.choice(street_idx, size=n_cars, replace=False)
        cars.flat[chosen] = 1

    free_idx = np.flatnonzero(buildings == 0)
    if free_idx.size == 0:
        raise ValueError("no free pixel left for the transmitter")
    tx_flat = int(rng.choice(free_idx))
    tx = (tx_flat // size, tx_flat % size)
    return Scene(buildings, cars, tx, seed=seed, rects=rects)


def draw_tx_locations(buildings: np.ndarray, count: int, seed: int) -> list[tuple[int, int]]:
    """`count` distinct non-building pixels, uniformly drawn, seeded."""
    free_idx = np.flatnonzero(buildings == 0)
    if free_idx.size < count:
        raise ValueError(f"need {count} free pixels, only {free_idx.size} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(free_idx, size=count, replace=False)
    w = buildings.shape[1]
    return [(int(i) // w, int(i) % w) for i in chosen]


def tx_onehot(scene: Scene) -> np.ndarray:
    """Grid with 1 at the transmitter pixel and 0 elsewhere."""
    g = np.zeros(scene.shape, dtype=np.float64)
    g[scene.tx] = 1.0
    return g


def split_maps(n_maps: int, fractions: tuple[float, float, float], seed: int) -> DatasetSplit:
    """Seeded shuffle of map ids into train/val/test by rounded fractions."""
    if n_maps < 3:
        raise ValueError("need at least 3 maps to split")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n_maps)
    n_train = int(round(n_maps * fractions[0]))
    n_val = int(round(n_maps * fractions[1]))
    n_train = min(n_train, n_maps)
    n_val = min(n_val, n_maps - n_train)
    train = tuple(int(i) for i in ids[:n_train])
    val = tuple(int(i) for i in ids[n_train:n_train + n_val])
    test = tuple(int(i) for i in ids[n_train + n_val:])
    return DatasetSplit(train, val, test)


# --- PGM (binary P5, maxval 255) ---------------------------------------

def save_pgm(grid: np.ndarray, path) -> None:
    """Write a [0,1] grid as an 8-bit binary PGM."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2:
        raise ValueError("grid must be 2D")
    if np.any(g < -1e-9) or np.any(g > 1.0 + 1e-9):
        raise ValueError("grid values must lie in [0, 1]")
    data = np.rint(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM back into a float grid in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ValueError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    payload = raw[pos:]
    if len(payload) != w * h:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header "
                         f"declares {w * h}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


# --- scene sidecar -------------------------------------------------------

def scene_sidecar(scene: Scene, tx_list: list[tuple[int, int]]) -> dict:
    """JSON-serializable record of how a scene was generated."""
    return {
        "seed": scene.seed,
        "rects": [list(r) for r in scene.rects],
        "car_pixels": [[int(r), int(c)] for r, c in np.argwhere(scene.cars > 0)],
        "tx": [[int(r), int(c)] for r, c in tx_list],
        "meters_per_pixel": scene.meters_per_pixel,
    }


def save_sidecar(scene: Scene, tx_list: list[tuple[int, int]], path) -> None:
    Path(path).write_text(json.dumps(scene_sidecar(scene, tx_list), indent=1))


def load_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())
