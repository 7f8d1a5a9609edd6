"""Ground-truth pathloss simulation on 2D scenes.

Three fidelities stand in for commercial propagation tools:

  coarse_a  - direct ray only, buildings attenuate per crossed pixel
  coarse_b  - adds single-bend paths around building corners
  refined   - coarse_b plus per-pixel car attenuation on every leg

A ray from a to b loses `free_space_pl_db(|a-b|)` plus a fixed dB penalty
for every mask pixel whose interior the open segment crosses (endpoints'
own cells excluded). Bend paths pay an extra fixed penalty. The output map
is the per-pixel maximum over all candidate paths, converted to gray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import Scene
from .linkbudget import LinkBudget, to_gray

COARSE_A = "coarse_a"
COARSE_B = "coarse_b"
REFINED = "refined"
FIDELITY_KINDS = (COARSE_A, COARSE_B, REFINED)

# separation below which two gridline crossings count as one corner touch
_EPS = 1e-9


@dataclass(frozen=True)
class Fidelity:
    kind: str = COARSE_B
    wall_db_per_pixel: float = 2.0
    car_db_per_pixel: float = 1.0
    bend_penalty_db: float = 15.0
    corner_candidate_stride: int = 2

    def __post_init__(self):
        if self.kind not in FIDELITY_KINDS:
            raise ValueError(f"unknown fidelity kind {self.kind!r}")
        if min(self.wall_db_per_pixel, self.car_db_per_pixel,
               self.bend_penalty_db) < 0:
            raise ValueError("penalties must be nonnegative")
        if self.corner_candidate_stride < 1:
            raise ValueError("corner_candidate_stride must be >= 1")


def free_space_pl_db(d_meters) -> np.ndarray | float:
    """Distance pathloss anchored so that PL(1 m) is the scale maximum."""
    d = np.maximum(np.asarray(d_meters, dtype=float), 1.0)
    out = -47.84 - 20.0 * np.log10(d)
    return float(out) if np.isscalar(d_meters) else out


def _interior_cells(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells (other than the endpoints') whose interior the open segment
    from pixel center a to pixel center b intersects."""
    r0, c0 = a
    r1, c1 = b
    dr, dc = r1 - r0, c1 - c0
    adr, adc = abs(dr), abs(dc)
    ts: list[float] = []
    for j in range(adc):
        ts.append((j + 0.5) / adc)
    for i in range(adr):
        ts.append((i + 0.5) / adr)
    ts.sort()
    cells = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 <= _EPS:
            continue  # corner touch, no interior
        tm = 0.5 * (t0 + t1)
        cells.append((round(r0 + tm * dr), round(c0 + tm * dc)))
    return cells


def segment_obstruction(scene: Scene, a: tuple[int, int], b: tuple[int, int],
                        include_cars: bool = False) -> tuple[int, int]:
    """(building pixels, car pixels) crossed strictly between a and b."""
    h, w = scene.shape
    for r, c in (a, b):
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"segment endpoint ({r},{c}) outside {h}x{w} grid")
    nb = nc = 0
    for r, c in _interior_cells(a, b):
        if scene.buildings[r, c]:
            nb += 1
        if include_cars and scene.cars[r, c]:
            nc += 1
    return nb, nc


def obstruction_maps(origin: tuple[int, int], masks: list[np.ndarray],
                     chunk_pixels: int = 1 << 17) -> list[np.ndarray]:
    """Crossed-pixel counts from `origin` to every pixel, one count map per
    mask. Same cell semantics as segment_obstruction, vectorized."""
    h, w = masks[0].shape
    r0, c0 = origin
    flats = [m.reshape(-1).astype(np.float64) for m in masks]
    outs = [np.zeros(h * w, dtype=np.float64) for _ in masks]
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dr_all = (rr - r0).reshape(-1)
    dc_all = (cc - c0).reshape(-1)
    jv = np.arange(w - 1, dtype=np.float64) + 0.5
    jh = np.arange(h - 1, dtype=np.float64) + 0.5
    n = h * w
    step = max(1, chunk_pixels // (h + w))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        dr = dr_all[lo:hi].astype(np.float64)
        dc = dc_all[lo:hi].astype(np.float64)
        adr = np.abs(dr)[:, None]
        adc = np.abs(dc)[:, None]
        tv = jv[None, :] / np.maximum(adc, 1.0)
        tv[np.broadcast_to(jv[None, :], tv.shape) > adc] = np.inf
        th = jh[None, :] / np.maximum(adr, 1.0)
        th[np.broadcast_to(jh[None, :], th.shape) > adr] = np.inf
        t = np.concatenate([tv, th], axis=1)
        t.sort(axis=1)
        with np.errstate(invalid="ignore"):
            gaps = t[:, 1:] - t[:, :-1]
            valid = np.isfinite(t[:, 1:]) & (gaps > _EPS)
        mid = np.where(valid, 0.5 * (t[:, 1:] + t[:, :-1]), 0.0)
        cell_r = np.rint(r0 + mid * dr[:, None]).astype(np.int64)
        cell_c = np.rint(c0 + mid * dc[:, None]).astype(np.int64)
        np.clip(cell_r, 0, h - 1, out=cell_r)
        np.clip(cell_c, 0, w - 1, out=cell_c)
        flat_idx = cell_r * w + cell_c
        for out, m in zip(outs, flats):
            out[lo:hi] = np.sum(m[flat_idx] * valid, axis=1)
    return [o.reshape(h, w) for o in outs]


def corner_candidates(buildings: np.ndarray, stride: int) -> list[tuple[int, int]]:
    """Building pixels with two free orthogonal neighbors in perpendicular
    directions (rectangle corner tips), subsampled by `stride`."""
    b = buildings.astype(bool)
    padded = np.zeros((b.shape[0] + 2, b.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = b
    free_n = ~padded[:-2, 1:-1]
    free_s = ~padded[2:, 1:-1]
    free_w = ~padded[1:-1, :-2]
    free_e = ~padded[1:-1, 2:]
    corner = b & ((free_n & free_w) | (free_n & free_e)
                  | (free_s & free_w) | (free_s & free_e))
    pts = [(int(r), int(c)) for r, c in np.argwhere(corner)]
    return pts[::stride]


def _distance_map(origin: tuple[int, int], shape: tuple[int, int]) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.hypot(rr - origin[0], cc - origin[1])


def _pathloss_maps(scene: Scene, fids: list[Fidelity], lb: LinkBudget) -> dict[str, np.ndarray]:
    """Best-path pathloss in dB for each requested fidelity, sharing the
    expensive crossing-count maps between fidelities."""
    kinds = {f.kind: f for f in fids}
    need_bends = any(k != COARSE_A for k in kinds)
    need_cars = REFINED in kinds
    masks = [scene.buildings, scene.cars] if need_cars else [scene.buildings]

    d_tx = _distance_map(scene.tx, scene.shape)
    counts = obstruction_maps(scene.tx, masks)
    bld_tx = counts[0]
    car_tx = counts[1] if need_cars else None

    bend_data = []
    if need_bends:
        stride = max(f.corner_candidate_stride for f in fids if f.kind != COARSE_A)
        for cand in corner_candidates(scene.buildings, stride):
            leg1_len = math.hypot(cand[0] - scene.tx[0], cand[1] - scene.tx[1])
            b1, c1 = segment_obstruction(scene, scene.tx, cand, include_cars=need_cars)
            cand_counts = obstruction_maps(cand, masks)
            bend_data.append({
                "len1": leg1_len,
                "bld1": b1,
                "car1": c1,
                "len2": _distance_map(cand, scene.shape),
                "bld2": cand_counts[0],
                "car2": cand_counts[1] if need_cars else None,
            })

    out: dict[str, np.ndarray] = {}
    for kind, fid in kinds.items():
        use_cars = kind == REFINED
        pl = free_space_pl_db(d_tx) - fid.wall_db_per_pixel * bld_tx
        if use_cars:
            pl = pl - fid.car_db_per_pixel * car_tx
        if kind != COARSE_A:
            for bd in bend_data:
                bend = (free_space_pl_db(bd["len1"] + bd["len2"])
                        - fid.wall_db_per_pixel * (bd["bld1"] + bd["bld2"])
                        - fid.bend_penalty_db)
                if use_cars:
                    bend = bend - fid.car_db_per_pixel * (bd["car1"] + bd["car2"])
                np.maximum(pl, bend, out=pl)
        out[kind] = pl
    return out


def simulate(scene: Scene, fid: Fidelity, lb: LinkBudget) -> np.ndarray:
    """Gray-level radio map for one scene and fidelity."""
    pl = _pathloss_maps(scene, [fid], lb)[fid.kind]
    return to_gray(lb, pl)


def simulate_many(scene: Scene, fids: list[Fidelity], lb: LinkBudget) -> dict[str, np.ndarray]:
    """Gray-level radio maps for several fidelities at once (shared rays)."""
    return {k: to_gray(lb, pl) for k, pl in _pathloss_maps(scene, fids, lb).items()}
