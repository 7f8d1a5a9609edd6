"""Declarative model construction: UNet, two-stage WNet, coordinate MLP.

Architectures are described by small spec dataclasses so parameter counts
are predictable and checkpoints can rebuild the exact network. Initial
weights are uniform in +-1/sqrt(fan_in), drawn from a seeded generator in
a fixed order, so (spec, seed) pins every parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

CHECKPOINT_VERSION = 1

WNET_RETROSPECTIVE = "retrospective"
WNET_ADAPTATION = "adaptation"
WNET_THRESHOLDER = "thresholder"
WNET_MODES = (WNET_RETROSPECTIVE, WNET_ADAPTATION, WNET_THRESHOLDER)


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ValueError("need at least 2 stages")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "stage_channels": list(self.stage_channels),
                "kernel_size": self.kernel_size,
                "out_channels": self.out_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        return cls(in_channels=d["in_channels"],
                   stage_channels=tuple(d["stage_channels"]),
                   kernel_size=d["kernel_size"],
                   out_channels=d.get("out_channels", 1))


@dataclass(frozen=True)
class WNetSpec:
    first: UNetSpec
    second: UNetSpec
    mode: str = WNET_RETROSPECTIVE

    def __post_init__(self):
        if self.mode not in WNET_MODES:
            raise ValueError(f"unknown WNet mode {self.mode!r}")
        if self.second.in_channels != self.first.in_channels + 1:
            raise ValueError("second UNet must take first's inputs plus its output")

    def to_dict(self) -> dict:
        return {"first": self.first.to_dict(), "second": self.second.to_dict(),
                "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "WNetSpec":
        return cls(UNetSpec.from_dict(d["first"]), UNetSpec.from_dict(d["second"]),
                   d["mode"])


@dataclass(frozen=True)
class MlpSpec:
    hidden_sizes: tuple[int, ...] = (128, 128, 128)
    in_features: int = 4
    out_features: int = 1

    def __post_init__(self):
        if any(s < 1 for s in self.hidden_sizes):
            raise ValueError("hidden sizes must be >= 1")

    def to_dict(self) -> dict:
        return {"hidden_sizes": list(self.hidden_sizes),
                "in_features": self.in_features, "out_features": self.out_features}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["hidden_sizes"]), d["in_features"], d["out_features"])


def _init_conv(rng, c_out, c_in, k, dtype):
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(c_out,)).astype(dtype)
    return Parameter(w), Parameter(b)


def _init_dense(rng, f_in, f_out, dtype):
    bound = 1.0 / np.sqrt(f_in)
    w = rng.uniform(-bound, bound, size=(f_in, f_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(f_out,)).astype(dtype)
    return Parameter(w), Parameter(b)


def _conv_layer_plan(spec: UNetSpec) -> list[tuple[int, int, int]]:
    """(c_in, c_out, k) for every conv in canonical order."""
    k = spec.kernel_size
    ch = spec.stage_channels
    plan = []
    prev = spec.in_channels
    for c in ch:
        plan.append((prev, c, k))
        plan.append((c, c, k))
        prev = c
    for i in range(len(ch) - 2, -1, -1):
        plan.append((ch[i] + ch[i + 1], ch[i], k))
        plan.append((ch[i], ch[i], k))
    plan.append((ch[0], spec.out_channels, 1))
    return plan


def unet_param_count(spec: UNetSpec) -> int:
    return sum(k * k * ci * co + co for ci, co, k in _conv_layer_plan(spec))


class UNet:
    """Encoder-decoder with skip connections, built from a UNetSpec.

    Each encoder stage is conv-relu-conv-relu followed by 2x2 max pooling
    (except the deepest); each decoder stage upsamples, concatenates the
    matching encoder features, and applies conv-relu-conv-relu; a final
    1x1 conv maps to out_channels.
    """

    kind = "unet"

    def __init__(self, spec: UNetSpec, seed: int, padding: str = "zeros",
                 dtype=np.float64):
        self.spec = spec
        self.seed = seed
        self.padding = padding
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._convs = [_init_conv(rng, co, ci, k, self.dtype)
                       for ci, co, k in _conv_layer_plan(spec)]

    def parameters(self) -> list[Parameter]:
        return [p for pair in self._convs for p in pair]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        n_stages = len(self.spec.stage_channels)
        h, w = x.data.shape[-2:]
        divisor = 1 << (n_stages - 1)
        if h % divisor or w % divisor:
            raise ValueError(f"spatial size {h}x{w} not divisible by {divisor}")
        li = 0
        skips = []
        cur = x
        for s in range(n_stages):
            for _ in range(2):
                wt, bt = self._convs[li]
                li += 1
                cur = ad.relu(ad.conv2d(cur, wt, bt, self.padding))
            if s < n_stages - 1:
                skips.append(cur)
                cur = ad.maxpool2(cur)
        for s in range(n_stages - 2, -1, -1):
            cur = ad.concat_channels(skips.pop(), ad.upsample2(cur))
            for _ in range(2):
                wt, bt = self._convs[li]
                li += 1
                cur = ad.relu(ad.conv2d(cur, wt, bt, self.padding))
        wt, bt = self._convs[li]
        return ad.conv2d(cur, wt, bt, self.padding)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Gray-level map(s) for a (C,H,W) or (N,C,H,W) input stack,
        clipped to [0, 1]. Raw (unclipped) outputs are used in training."""
        arr = np.asarray(inputs, dtype=self.dtype)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        out = self.forward(Tensor(arr)).data
        out = np.clip(out[:, 0], 0.0, 1.0)
        return out[0] if single else out


class WNet:
    """Two UNets in sequence; the second sees the inputs plus the first's
    output as an extra channel. Training is phase-wise: the first UNet is
    always frozen while the second trains, so the composition forward pass
    treats the first's output as data (no gradient into the first)."""

    kind = "wnet"

    def __init__(self, spec: WNetSpec, seed: int, dtype=np.float64,
                 first: UNet | None = None, second: UNet | None = None):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.first = first or UNet(spec.first, seed, dtype=dtype)
        self.second = second or UNet(spec.second, seed + 1, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return self.first.parameters() + self.second.parameters()

    def param_count(self) -> int:
        return self.first.param_count() + self.second.param_count()

    def second_input(self, inputs: np.ndarray) -> np.ndarray:
        """Inputs augmented with the first UNet's (detached) output."""
        arr = np.asarray(inputs, dtype=self.dtype)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        y1 = self.first.forward(Tensor(arr)).data
        aug = np.concatenate([arr, y1], axis=1)
        return aug[0] if single else aug

    def forward(self, x: Tensor) -> Tensor:
        y1 = self.first.forward(x).detach()
        return self.second.forward(ad.concat_channels(x, y1))

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return self.second.predict(self.second_input(inputs))


class Mlp:
    """Dense ReLU network mapping normalized (tx, rx) coordinates to one
    gray level; the baseline regressor for a fixed scene."""

    kind = "mlp"

    def __init__(self, spec: MlpSpec, seed: int, dtype=np.float64):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        sizes = (spec.in_features,) + spec.hidden_sizes + (spec.out_features,)
        self._layers = [_init_dense(rng, sizes[i], sizes[i + 1], self.dtype)
                        for i in range(len(sizes) - 1)]

    def parameters(self) -> list[Parameter]:
        return [p for pair in self._layers for p in pair]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        cur = x
        for i, (wt, bt) in enumerate(self._layers):
            cur = ad.linear(cur, wt, bt)
            if i < len(self._layers) - 1:
                cur = ad.relu(cur)
        return cur

    def predict_pairs(self, tx: tuple[int, int], rx: np.ndarray, size: int) -> np.ndarray:
        """Gray estimates for rx pixels (k,2) given one tx, clipped to [0,1]."""
        rx = np.asarray(rx, dtype=self.dtype)
        if np.any(rx < 0) or np.any(rx > size - 1):
            raise ValueError("rx coordinates outside the grid")
        if not (0 <= tx[0] < size and 0 <= tx[1] < size):
            raise ValueError("tx coordinates outside the grid")
        denom = max(size - 1, 1)
        feats = np.empty((rx.shape[0], 4), dtype=self.dtype)
        feats[:, 0] = tx[0] / denom
        feats[:, 1] = tx[1] / denom
        feats[:, 2] = rx[:, 0] / denom
        feats[:, 3] = rx[:, 1] / denom
        out = self.forward(Tensor(feats)).data[:, 0]
        return np.clip(out, 0.0, 1.0)

    def render_map(self, tx: tuple[int, int], size: int) -> np.ndarray:
        """Full-map prediction: one forward pass per pixel, batched."""
        rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        rx = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)
        return self.predict_pairs(tx, rx, size).reshape(size, size)


def build_unet(spec: UNetSpec, seed: int, padding: str = "zeros",
               dtype=np.float64) -> UNet:
    return UNet(spec, seed, padding=padding, dtype=dtype)


def build_wnet(spec: WNetSpec, seed: int, dtype=np.float64) -> WNet:
    return WNet(spec, seed, dtype=dtype)


def build_mlp(spec: MlpSpec, seed: int, dtype=np.float64) -> Mlp:
    return Mlp(spec, seed, dtype=dtype)


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """JSON header line + little-endian float64 parameter blob."""
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "dtype": str(model.dtype),
        "param_count": int(sum(p.data.size for p in params)),
        "metadata": metadata or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; bit-exact parameter round trip."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed checkpoint header") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unknown checkpoint version {header.get('version')!r}")
    blob = np.frombuffer(raw[nl + 1:], dtype="<f8")
    declared = header["param_count"]
    if blob.size != declared:
        raise ValueError(f"{path}: header declares {declared} parameters, "
                         f"blob holds {blob.size}")
    dtype = np.dtype(header["dtype"])
    kind = header["kind"]
    if kind == "unet":
        model = UNet(UNetSpec.from_dict(header["spec"]), header["seed"], dtype=dtype)
    elif kind == "wnet":
        model = WNet(WNetSpec.from_dict(header["spec"]), header["seed"], dtype=dtype)
    elif kind == "mlp":
        model = Mlp(MlpSpec.from_dict(header["spec"]), header["seed"], dtype=dtype)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    expected = sum(p.data.size for p in model.parameters())
    if expected != declared:
        raise ValueError(f"{path}: spec implies {expected} parameters, header "
                         f"declares {declared}")
    offset = 0
    for p in model.parameters():
        n = p.data.size
        p.data = blob[offset:offset + n].reshape(p.data.shape).astype(dtype)
        offset += n
    model.metadata = header.get("metadata", {})
    return model


def checkpoint_metadata(path) -> dict:
    """Read just the JSON header of a checkpoint."""
    with open(path, "rb") as f:
        line = f.readline()
    return json.loads(line.decode("utf-8"))
