"""Downstream applications: coverage classification and fingerprint
localization by intersecting level sets of estimated radio maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NoLocalizationError(RuntimeError):
    """Every randomized trial produced an empty level-set intersection."""


@dataclass(frozen=True)
class CoverageMap:
    grid: np.ndarray          # binary
    threshold: float


def hard_coverage(gain: np.ndarray, threshold: float) -> CoverageMap:
    """Indicator of gain strictly above the service threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    return CoverageMap((np.asarray(gain) > threshold).astype(np.uint8), threshold)


def soft_coverage(gain: np.ndarray, threshold: float, alpha: float) -> np.ndarray:
    """Sigmoid relaxation of the coverage indicator; values in (0, 1) read
    as the probability of being inside the coverage area."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = alpha * (np.asarray(gain, dtype=np.float64) - threshold)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def coverage_metrics(pred: np.ndarray, truth: CoverageMap) -> dict:
    """RMSE of the probability map and accuracy of its 0.5-thresholding
    against the binary truth."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != truth.grid.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.grid.shape}")
    t = truth.grid.astype(np.float64)
    rmse = float(np.sqrt(np.mean((pred - t) ** 2)))
    acc = float(np.mean((pred > 0.5) == (truth.grid > 0)))
    return {"rmse": rmse, "pixel_accuracy": acc}


def level_set(fmap: np.ndarray, g: float, eps: float,
              buildings: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of pixels whose map value is within eps of the report;
    building pixels are excluded (receivers are outdoors)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mask = np.abs(np.asarray(fmap, dtype=np.float64) - g) <= eps
    if buildings is not None:
        mask &= np.asarray(buildings) == 0
    return mask


@dataclass
class LocalizationProblem:
    """K estimated maps with reported gains; localization intersects
    eps-level sets over random J-subsets, R times, and keeps the
    lowest-variance non-empty outcome.

    eps may be a single float or an (eps_min, eps_max) range from which a
    per-map value is drawn each trial. Reports at gray level 0 are below
    the truncation floor and are dropped together with their maps.
    """

    maps: list[np.ndarray]
    reports: list[float]
    eps: float | tuple[float, float] = (0.01, 0.05)
    subset_size: int = 5
    trials: int = 5
    seed: int = 0
    buildings: np.ndarray | None = None

    def __post_init__(self):
        if len(self.maps) != len(self.reports):
            raise ValueError("one report per map required")
        keep = [i for i, g in enumerate(self.reports) if g > 0]
        if len(keep) != len(self.reports):
            self.maps = [self.maps[i] for i in keep]
            self.reports = [self.reports[i] for i in keep]
        if self.subset_size < 1 or self.trials < 1:
            raise ValueError("subset_size and trials must be >= 1")
        if len(self.maps) < self.subset_size:
            raise ValueError(f"{len(self.maps)} usable maps but subsets of "
                             f"{self.subset_size} requested")


@dataclass
class LocalizationResult:
    estimate: tuple[float, float]
    variance: float
    chosen_trial: int
    trial_log: list[dict] = field(default_factory=list)


def _eps_values(problem: LocalizationProblem, rng, count: int) -> np.ndarray:
    if isinstance(problem.eps, (int, float)):
        if problem.eps <= 0:
            raise ValueError("eps must be positive")
        return np.full(count, float(problem.eps))
    lo, hi = problem.eps
    if lo <= 0 or hi < lo:
        raise ValueError("eps range must satisfy 0 < lo <= hi")
    return rng.uniform(lo, hi, size=count)


def localize(problem: LocalizationProblem) -> LocalizationResult:
    """Run the randomized subset-intersection estimator.

    Deterministic in the problem seed. Raises NoLocalizationError when all
    trials intersect to the empty set."""
    rng = np.random.default_rng(problem.seed)
    k = len(problem.maps)
    log: list[dict] = []
    best: tuple[float, int] | None = None
    best_centroid = None
    for t in range(problem.trials):
        subset = np.sort(rng.choice(k, size=problem.subset_size, replace=False))
        eps_vals = _eps_values(problem, rng, problem.subset_size)
        inter = None
        for idx, e in zip(subset, eps_vals):
            ls = level_set(problem.maps[idx], problem.reports[idx], float(e),
                           problem.buildings)
            inter = ls if inter is None else (inter & ls)
        pts = np.argwhere(inter)
        entry = {"trial": t, "subset": [int(i) for i in subset],
                 "eps": [float(e) for e in eps_vals], "set_size": int(pts.shape[0])}
        if pts.shape[0] > 0:
            centroid = pts.mean(axis=0)
            var = float(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
            entry["centroid"] = [float(centroid[0]), float(centroid[1])]
            entry["variance"] = var
            if best is None or var < best[0]:
                best = (var, t)
                best_centroid = (float(centroid[0]), float(centroid[1]))
        log.append(entry)
    if best is None:
        raise NoLocalizationError(
            f"all {problem.trials} trials produced empty intersections")
    return LocalizationResult(best_centroid, best[0], best[1], log)
