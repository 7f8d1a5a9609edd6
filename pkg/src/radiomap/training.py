"""Optimization and training protocols.

Adam with bias correction, seeded mini-batch supervised training with
validation-based snapshot selection, sparse measurement sampling, frozen
two-stage refinement (retrospective improvement and adaptation to sparse
refined measurements), and the soft-to-hard coverage curriculum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grids import Scene

FIXED_A = "fixed_a"
FIXED_B = "fixed_b"
RANDOM_AB = "random_ab"
FIDELITY_MODES = (FIXED_A, FIXED_B, RANDOM_AB)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    fidelity_mode: str = FIXED_B
    select_on_validation: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.fidelity_mode not in FIDELITY_MODES:
            raise ValueError(f"unknown fidelity mode {self.fidelity_mode!r}")


@dataclass
class Sample:
    """One training example: channel stack, dense target, optional
    per-pixel loss weights (for sparse-measurement fitting)."""

    inputs: np.ndarray            # (C,H,W)
    target: np.ndarray            # (H,W)
    weights: np.ndarray | None = None
    map_id: int = -1
    tx_index: int = -1


@dataclass
class SparseSamples:
    """K measured pixels of one radio map."""

    locations: np.ndarray         # (K,2) int
    values: np.ndarray            # (K,)

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.locations.shape[0] != self.values.shape[0]:
            raise ValueError("locations and values must have equal length")
        uniq = {(int(r), int(c)) for r, c in self.locations}
        if len(uniq) != self.locations.shape[0]:
            raise ValueError("sample locations must be unique")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("sample values must lie in [0, 1]")

    @property
    def count(self) -> int:
        return int(self.values.size)

    def to_channel(self, shape: tuple[int, int]) -> np.ndarray:
        """Measured values at their pixels, zero elsewhere."""
        g = np.zeros(shape, dtype=np.float64)
        g[self.locations[:, 0], self.locations[:, 1]] = self.values
        return g

    def to_weights(self, shape: tuple[int, int]) -> np.ndarray:
        """1/K at each measured pixel, zero elsewhere."""
        w = np.zeros(shape, dtype=np.float64)
        if self.count:
            w[self.locations[:, 0], self.locations[:, 1]] = 1.0 / self.count
        return w

    def to_dict(self) -> dict:
        return {"locations": self.locations.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SparseSamples":
        return cls(np.asarray(d["locations"]), np.asarray(d["values"]))


def sample_measurements(gain: np.ndarray, scene: Scene, k: int, seed: int) -> SparseSamples:
    """k unique uniformly drawn non-building pixels with their gray values."""
    free_idx = np.flatnonzero(scene.buildings.reshape(-1) == 0)
    if k > free_idx.size:
        raise ValueError(f"asked for {k} samples, only {free_idx.size} free pixels")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(free_idx, size=k, replace=False))
    w = scene.shape[1]
    locs = np.stack([chosen // w, chosen % w], axis=1)
    return SparseSamples(locs, gain.reshape(-1)[chosen])


# --- Adam -----------------------------------------------------------------

class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    if len(grads) != len(state.m):
        raise ValueError("gradient list does not match optimizer state")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# --- supervised loop --------------------------------------------------------

def _stack_batch(samples: list[Sample], dtype) -> tuple[Tensor, Tensor, np.ndarray | None]:
    x = np.stack([s.inputs for s in samples]).astype(dtype)
    y = np.stack([s.target[None] for s in samples]).astype(dtype)
    if samples[0].weights is None:
        return Tensor(x), Tensor(y), None
    w = np.stack([s.weights[None] for s in samples]).astype(dtype)
    return Tensor(x), Tensor(y), w


def _batch_loss(model, batch: list[Sample], dtype) -> Tensor:
    x, y, w = _stack_batch(batch, dtype)
    pred = model.forward(x)
    if w is None:
        return ad.mse_loss(pred, y)
    # per-map weights sum to 1; normalize by batch size so batches average
    return ad.weighted_mse_loss(pred, y, w / len(batch))


def _eval_loss(model, samples: list[Sample], dtype, batch_size: int) -> float:
    if not samples:
        return float("nan")
    total = 0.0
    weight = 0.0
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        loss = _batch_loss(model, batch, dtype)
        total += loss.item() * len(batch)
        weight += len(batch)
    return total / weight


def dense_mse(model, samples: list[Sample], dtype=np.float64) -> float:
    """Plain dense MSE of clipped predictions, ignoring sample weights."""
    errs = []
    for s in samples:
        pred = model.predict(np.asarray(s.inputs, dtype=dtype))
        errs.append(np.mean((pred - s.target) ** 2))
    return float(np.mean(errs))


def train_supervised(model, train_set: list[Sample], val_set: list[Sample],
                     cfg: TrainConfig, val_metric=None) -> list[dict]:
    """Seeded mini-batch training; keeps the snapshot with the lowest
    validation loss when select_on_validation is set. Returns the history
    as a list of {epoch, train_loss, val_loss} dicts."""
    if not train_set:
        raise ValueError("empty training set")
    if cfg.select_on_validation and not val_set:
        raise ValueError("validation selection requires a validation set")
    dtype = np.dtype(cfg.dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState(params)
    order_rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_val = np.inf
    best_params = None
    measure = val_metric or (lambda m: _eval_loss(m, val_set, dtype, cfg.batch_size))
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_set))
        epoch_loss = 0.0
        seen = 0
        for i in range(0, len(perm), cfg.batch_size):
            batch = [train_set[j] for j in perm[i:i + cfg.batch_size]]
            loss = _batch_loss(model, batch, dtype)
            ad.zero_grads(params)
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg)
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        val_loss = measure(model) if val_set else float("nan")
        history.append({"epoch": epoch, "train_loss": epoch_loss / seen,
                        "val_loss": val_loss})
        if cfg.select_on_validation and val_loss < best_val:
            best_val = val_loss
            best_params = [p.data.copy() for p in params]
    if cfg.select_on_validation and best_params is not None:
        for p, data in zip(params, best_params):
            p.data = data
    return history


# --- dataset assembly -------------------------------------------------------

def pick_fidelities(n: int, mode: str, seed: int) -> list[str]:
    """Per-sample target fidelity, fixed for the whole run."""
    from .simulator import COARSE_A, COARSE_B
    if mode == FIXED_A:
        return [COARSE_A] * n
    if mode == FIXED_B:
        return [COARSE_B] * n
    rng = np.random.default_rng(seed)
    return [COARSE_A if b else COARSE_B for b in rng.integers(0, 2, size=n)]


# --- two-stage protocols -----------------------------------------------------

def _augmented_samples(wnet, samples: list[Sample]) -> list[Sample]:
    """Samples whose inputs carry the frozen first UNet's output channel,
    precomputed once per sample."""
    out = []
    for s in samples:
        aug = wnet.second_input(s.inputs)
        out.append(Sample(aug, s.target, s.weights, s.map_id, s.tx_index))
    return out


def train_wnet_phase2(wnet, train_set: list[Sample], val_set: list[Sample],
                      cfg: TrainConfig, val_metric=None) -> list[dict]:
    """Train the second UNet against the same targets with the first
    frozen; the first's outputs are cached per sample."""
    wnet.first.set_trainable(False)
    aug_train = _augmented_samples(wnet, train_set)
    aug_val = _augmented_samples(wnet, val_set)
    if val_metric is not None:
        metric = lambda m: val_metric(wnet)
    else:
        metric = None
    return train_supervised(wnet.second, aug_train, aug_val, cfg, val_metric=metric)


def adapt_to_refined(wnet, sparse_train: list[Sample], dense_val: list[Sample],
                     cfg: TrainConfig) -> list[dict]:
    """Fit the second UNet on sparse refined measurements (weighted MSE on
    measured pixels only); validation selection scores dense refined MSE."""
    if not sparse_train:
        raise ValueError("no sparse training samples")
    if any(s.weights is None for s in sparse_train):
        raise ValueError("adaptation samples need per-pixel weights")
    wnet.first.set_trainable(False)
    aug_train = _augmented_samples(wnet, sparse_train)
    aug_val = _augmented_samples(wnet, dense_val)
    dtype = np.dtype(cfg.dtype)

    def metric(second):
        return dense_mse(second, aug_val, dtype)

    return train_supervised(wnet.second, aug_train, aug_val, cfg, val_metric=metric)


def coverage_targets(gain: np.ndarray, threshold: float, alpha: float) -> np.ndarray:
    """Soft coverage target sigmoid(alpha * (gain - threshold))."""
    z = alpha * (gain - threshold)
    out = np.empty_like(np.asarray(z, dtype=np.float64))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def coverage_curriculum(wnet, train_set: list[Sample], val_set: list[Sample],
                        threshold: float, alphas: list[float],
                        cfg: TrainConfig) -> list[dict]:
    """Train the thresholder second UNet against soft coverage maps of
    increasing sharpness, warm-starting each stage from the last. The
    samples' targets must be the dense true gain maps; stage targets are
    derived from them."""
    if not alphas:
        raise ValueError("empty curriculum schedule")
    wnet.first.set_trainable(False)
    aug_train = _augmented_samples(wnet, train_set)
    aug_val = _augmented_samples(wnet, val_set)
    history: list[dict] = []
    for stage, alpha in enumerate(alphas):
        stage_train = [Sample(s.inputs, coverage_targets(s.target, threshold, alpha),
                              None, s.map_id, s.tx_index) for s in aug_train]
        stage_val = [Sample(s.inputs, coverage_targets(s.target, threshold, alpha),
                            None, s.map_id, s.tx_index) for s in aug_val]
        stage_cfg = replace(cfg, seed=cfg.seed + stage)
        hist = train_supervised(wnet.second, stage_train, stage_val, stage_cfg)
        for row in hist:
            row["alpha"] = alpha
            row["stage"] = stage
        history.extend(hist)
    return history


def parameter_blob(model) -> bytes:
    """Canonical byte serialization of all parameters (freeze checks)."""
    return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes()
                    for p in model.parameters())
