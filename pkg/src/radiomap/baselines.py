"""Classical estimation baselines.

Four methods the learned estimator is compared against: multiquadric RBF
interpolation of scattered measurements, matrix completion by iterative
singular-value shrinkage, single-parameter building-opacity tomography,
and the training harness for the coordinate-MLP regressor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import Scene
from .linkbudget import LinkBudget, to_gray
from .models import Mlp, MlpSpec
from .simulator import COARSE_A, Fidelity, free_space_pl_db, segment_obstruction, simulate
from .training import SparseSamples, TrainConfig


class SingularSystemError(ValueError):
    """The RBF system could not be solved (e.g. duplicate sample points)."""


def default_shape_parameter(locations: np.ndarray) -> float:
    """Mean nearest-neighbor distance among the sample points (>= 0.5)."""
    pts = np.asarray(locations, dtype=float)
    if pts.shape[0] < 2:
        return 1.0
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(max(np.mean(np.sqrt(d2.min(axis=1))), 0.5))


def rbf_interpolate(samples: SparseSamples, scene: Scene,
                    c: float | None = None) -> np.ndarray:
    """Multiquadric RBF interpolation phi(r) = sqrt(r^2 + c^2), evaluated
    at every pixel, with known building pixels zeroed afterwards."""
    if samples.count < 1:
        raise ValueError("need at least one sample")
    pts = samples.locations.astype(np.float64)
    if c is None:
        c = default_shape_parameter(pts)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    a = np.sqrt(d2 + c * c)
    try:
        w = np.linalg.solve(a, samples.values)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(
            f"singular RBF system for {samples.count} samples (duplicate points?)"
        ) from e
    h, wd = scene.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(wd), indexing="ij")
    grid_pts = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64)
    d2e = np.sum((grid_pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    est = (np.sqrt(d2e + c * c) @ w).reshape(h, wd)
    est[scene.buildings > 0] = 0.0
    return est


def _shrink_singular_values(x: np.ndarray, tau: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    return (u * s) @ vt


def matrix_complete(observed: SparseSamples, scene: Scene, tau: float | None = None,
                    step: float = 1.0, iters: int = 200,
                    tol: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Proximal-gradient matrix completion: gradient step toward the
    observed entries, then singular-value soft thresholding by tau*step.
    Returns (estimate with buildings zeroed, converged flag)."""
    if observed.count < 1:
        raise ValueError("need at least one observation")
    h, w = scene.shape
    mask = np.zeros((h, w), dtype=bool)
    target = np.zeros((h, w), dtype=np.float64)
    mask[observed.locations[:, 0], observed.locations[:, 1]] = True
    target[observed.locations[:, 0], observed.locations[:, 1]] = observed.values
    if tau is None:
        tau = 0.1 * np.linalg.svd(target, compute_uv=False)[0]
    x = np.zeros((h, w), dtype=np.float64)
    converged = False
    for _ in range(iters):
        grad = np.where(mask, x - target, 0.0)
        x_new = _shrink_singular_values(x - step * grad, tau * step)
        delta = float(np.linalg.norm(x_new - x))
        x = x_new
        if delta < tol:
            converged = True
            break
    x = x.copy()
    x[scene.buildings > 0] = 0.0
    return x, converged


def completion_objective(x: np.ndarray, observed: SparseSamples, tau: float) -> float:
    """0.5 ||P_obs(x - m)||^2 + tau ||x||_* (descent diagnostics)."""
    resid = (x[observed.locations[:, 0], observed.locations[:, 1]]
             - observed.values)
    nuclear = float(np.sum(np.linalg.svd(x, compute_uv=False)))
    return 0.5 * float(np.sum(resid ** 2)) + tau * nuclear


@dataclass
class TomographyModel:
    """A single opacity value (dB per building pixel) plus the averaging
    width used when counting crossed pixels."""

    slf_db_per_pixel: float
    oval_width: int = 1
    identifiable: bool = True
    residual: float = 0.0

    def __post_init__(self):
        if self.slf_db_per_pixel < 0:
            raise ValueError("opacity must be nonnegative")
        if self.oval_width < 1 or self.oval_width % 2 == 0:
            raise ValueError("oval_width must be odd and >= 1")


def _offset_counts(scene: Scene, a, b, width: int) -> float:
    """Building pixels crossed, averaged over `width` parallel segments
    offset perpendicular to a->b (width 1 degenerates to the segment)."""
    if width == 1 or a == b:
        return segment_obstruction(scene, a, b)[0]
    dr, dc = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(dr, dc)
    pr, pc = -dc / norm, dr / norm
    h, w = scene.shape
    counts = []
    for j in range(-(width // 2), width // 2 + 1):
        ar = min(max(int(round(a[0] + j * pr)), 0), h - 1)
        ac = min(max(int(round(a[1] + j * pc)), 0), w - 1)
        br = min(max(int(round(b[0] + j * pr)), 0), h - 1)
        bc = min(max(int(round(b[1] + j * pc)), 0), w - 1)
        counts.append(segment_obstruction(scene, (ar, ac), (br, bc))[0])
    return float(np.mean(counts))


def tomography_predict(scene: Scene, tx: tuple[int, int], model: TomographyModel,
                       lb: LinkBudget) -> np.ndarray:
    """Gray map from distance loss plus slf * crossed-building-pixels.

    With oval_width 1 this is exactly the direct-path simulator with the
    wall penalty replaced by the fitted opacity (shared code path)."""
    if not np.isfinite(model.slf_db_per_pixel):
        raise ValueError("opacity must be finite")
    placed = scene.with_tx(tx)
    if model.oval_width == 1:
        fid = Fidelity(kind=COARSE_A, wall_db_per_pixel=model.slf_db_per_pixel)
        return simulate(placed, fid, lb)
    h, w = scene.shape
    out = np.empty((h, w), dtype=np.float64)
    for r in range(h):
        for cidx in range(w):
            d = math.hypot(r - tx[0], cidx - tx[1])
            crossed = _offset_counts(placed, tx, (r, cidx), model.oval_width)
            out[r, cidx] = free_space_pl_db(d) - model.slf_db_per_pixel * crossed
    return to_gray(lb, out)


def _tomography_residual(f: float, dists, counts, values, lb: LinkBudget) -> float:
    pred = to_gray(lb, free_space_pl_db(dists) - f * counts)
    return float(np.sum((pred - values) ** 2))


def tomography_fit(scene: Scene, tx: tuple[int, int], samples: SparseSamples,
                   lb: LinkBudget, oval_width: int = 1,
                   f_max: float = 20.0, tol: float = 1e-4) -> TomographyModel:
    """Golden-section least-squares fit of the opacity on [0, f_max].

    If no sample path crosses a building the opacity is unidentifiable
    and the model is returned with f = 0 and identifiable = False."""
    if samples.count < 1:
        raise ValueError("need at least one sample")
    placed = scene.with_tx(tx)
    dists = np.hypot(samples.locations[:, 0] - tx[0],
                     samples.locations[:, 1] - tx[1])
    counts = np.array([
        _offset_counts(placed, tx, (int(r), int(c)), oval_width)
        for r, c in samples.locations
    ], dtype=np.float64)
    if not np.any(counts > 0):
        res = _tomography_residual(0.0, dists, counts, samples.values, lb)
        return TomographyModel(0.0, oval_width, identifiable=False, residual=res)
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.0, f_max
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1 = _tomography_residual(x1, dists, counts, samples.values, lb)
    f2 = _tomography_residual(x2, dists, counts, samples.values, lb)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = _tomography_residual(x1, dists, counts, samples.values, lb)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = _tomography_residual(x2, dists, counts, samples.values, lb)
    f_best = 0.5 * (lo + hi)
    res = _tomography_residual(f_best, dists, counts, samples.values, lb)
    return TomographyModel(f_best, oval_width, identifiable=True, residual=res)


# --- MLP regression harness -------------------------------------------------


def _coordinate_rows(gains: dict, tx_list, size: int, dtype):
    """All (tx, rx) pairs of the given transmitters as (N,4)/(N,1) arrays."""
    denom = max(size - 1, 1)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    feats, vals = [], []
    for tx in tx_list:
        f = np.stack([
            np.full(size * size, tx[0] / denom),
            np.full(size * size, tx[1] / denom),
            rr.reshape(-1) / denom,
            cc.reshape(-1) / denom,
        ], axis=1)
        feats.append(f)
        vals.append(gains[tuple(tx)].reshape(-1, 1))
    return (np.concatenate(feats).astype(dtype),
            np.concatenate(vals).astype(dtype))


def train_mlp_baseline(scene: Scene, gains: dict, tx_split: tuple[list, list, list],
                       cfg: TrainConfig, spec: MlpSpec = MlpSpec(),
                       model_seed: int = 0) -> tuple[Mlp, list[dict]]:
    """Fit the coordinate MLP on all (tx, rx) pairs of the training
    transmitters of one fixed scene, with validation-based selection over
    the validation transmitters. `gains` maps tx -> dense gray map."""
    from . import autodiff as ad
    from .training import AdamState, adam_step

    train_tx, val_tx, _ = tx_split
    if not train_tx or not val_tx:
        raise ValueError("empty transmitter split")
    size = scene.shape[0]
    dtype = np.dtype(cfg.dtype)
    mlp = Mlp(spec, model_seed, dtype=dtype)
    tr_f, tr_v = _coordinate_rows(gains, train_tx, size, dtype)
    va_f, va_v = _coordinate_rows(gains, val_tx, size, dtype)

    params = mlp.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best = (np.inf, None)
    chunk = max(cfg.batch_size, 256)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(tr_f.shape[0])
        total = 0.0
        for i in range(0, perm.size, chunk):
            idx = perm[i:i + chunk]
            loss = ad.mse_loss(mlp.forward(ad.Tensor(tr_f[idx])),
                               ad.Tensor(tr_v[idx]))
            ad.zero_grads(params)
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg)
            total += loss.item() * idx.size
        val_loss = float(np.mean((mlp.forward(ad.Tensor(va_f)).data - va_v) ** 2))
        history.append({"epoch": epoch, "train_loss": total / perm.size,
                        "val_loss": val_loss})
        if cfg.select_on_validation and val_loss < best[0]:
            best = (val_loss, [p.data.copy() for p in params])
    if cfg.select_on_validation and best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data = data
    return mlp, history
