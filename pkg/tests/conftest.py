"""Shared fixtures for the acceptance suite.

The expensive artifacts (datasets, trained estimators) are built once per
session and reused across acceptance criteria. Sizes are chosen so the
whole suite stays laptop-friendly while preserving every qualitative
phenomenon the experiments check.
"""

from dataclasses import replace

import numpy as np
import pytest

from radiomap import datasets, simulator, training
from radiomap.datasets import ChannelConfig, DatasetConfig
from radiomap.grids import SceneParams, split_maps
from radiomap.linkbudget import LinkBudget
from radiomap.models import UNet, UNetSpec, WNet, WNetSpec
from radiomap.training import TrainConfig


LB = LinkBudget()


def train_in_stages(model, train_set, val_set, cfg, stage_plan):
    """Run several training legs with decreasing learning rates, warm
    starting each from the last; returns the concatenated history."""
    history = []
    for i, (lr, epochs) in enumerate(stage_plan):
        leg = replace(cfg, lr=lr, epochs=epochs, seed=cfg.seed + i)
        history += training.train_supervised(model, train_set, val_set, leg)
    return history


@pytest.fixture(scope="session")
def desk_dataset():
    """64x64 dataset with all three fidelities: the main test bed."""
    cfg = DatasetConfig(
        seed=300, n_maps=50, tx_per_map=2, size=64,
        scene=SceneParams(building_count=8, building_size_range=(6, 14),
                          car_count=30),
        refined_sample_count=100, refined_sample_seed=17,
    )
    return datasets.generate_dataset(cfg, LB)


@pytest.fixture(scope="session")
def desk_split(desk_dataset):
    return split_maps(len(desk_dataset.maps), (0.8, 0.1, 0.1), seed=7)


@pytest.fixture(scope="session")
def trained_c(desk_dataset, desk_split):
    """Map+tx+cars estimator trained on dense refined maps."""
    ch = ChannelConfig(use_cars=True, use_samples=False)
    train = datasets.assemble_samples(desk_dataset, desk_split.train_map_ids,
                                      simulator.REFINED, ch)
    val = datasets.assemble_samples(desk_dataset, desk_split.val_map_ids,
                                    simulator.REFINED, ch)
    net = UNet(UNetSpec(ch.channel_count, (8, 16, 32, 64)), seed=41,
               dtype=np.float32)
    cfg = TrainConfig(batch_size=2, seed=11, dtype="float32")
    train_in_stages(net, train, val, cfg, [(2e-3, 60), (7e-4, 30)])
    return net, ch


@pytest.fixture(scope="session")
def trained_s(desk_dataset, desk_split):
    """Map+tx+cars+measurements estimator (1..50 samples per map)."""
    ch = ChannelConfig(use_cars=True, use_samples=True, k_min=1, k_max=50,
                       sample_seed=23)
    train = datasets.assemble_samples(desk_dataset, desk_split.train_map_ids,
                                      simulator.REFINED, ch)
    val = datasets.assemble_samples(desk_dataset, desk_split.val_map_ids,
                                    simulator.REFINED, ch)
    net = UNet(UNetSpec(ch.channel_count, (8, 16, 32, 64)), seed=43,
               dtype=np.float32)
    cfg = TrainConfig(batch_size=2, seed=13, dtype="float32")
    train_in_stages(net, train, val, cfg, [(2e-3, 60), (7e-4, 30)])
    return net, ch


@pytest.fixture(scope="session")
def transfer_dataset():
    """32x32 dataset for the transfer and coverage experiments."""
    cfg = DatasetConfig(
        seed=900, n_maps=36, tx_per_map=2, size=32,
        scene=SceneParams(building_count=5, building_size_range=(5, 9),
                          car_count=20),
        refined_sample_count=40, refined_sample_seed=19,
    )
    return datasets.generate_dataset(cfg, LB)


@pytest.fixture(scope="session")
def transfer_split(transfer_dataset):
    return split_maps(len(transfer_dataset.maps), (0.7, 0.15, 0.15), seed=3)


def pretrain_coarse(ds, split, mode: str, seed: int, epochs=40, lr=2e-3):
    """Train a small map+tx+cars net on coarse targets (fixed or mixed)."""
    ch = ChannelConfig(use_cars=True, use_samples=False)
    if mode == training.FIXED_A:
        targets = simulator.COARSE_A
    elif mode == training.FIXED_B:
        targets = simulator.COARSE_B
    else:
        keys = [(m, j) for m in split.train_map_ids
                for j in range(len(ds.maps[m].tx_list))]
        kinds = training.pick_fidelities(len(keys), mode, seed + 1000)
        targets = dict(zip(keys, kinds))
    train = datasets.assemble_samples(ds, split.train_map_ids, targets, ch)
    val = datasets.assemble_samples(ds, split.val_map_ids, simulator.COARSE_B, ch)
    net = UNet(UNetSpec(ch.channel_count, (8, 16, 32)), seed=seed,
               dtype=np.float32)
    cfg = TrainConfig(lr=lr, epochs=epochs, batch_size=2, seed=seed,
                      dtype="float32")
    training.train_supervised(net, train, val, cfg)
    return net, ch


def attach_second(first: UNet, mode: str, seed: int, stages=(8, 16, 32)) -> WNet:
    second_spec = UNetSpec(first.spec.in_channels + 1, tuple(stages),
                           first.spec.kernel_size)
    wspec = WNetSpec(first.spec, second_spec, mode)
    return WNet(wspec, first.seed, dtype=first.dtype, first=first,
                second=UNet(second_spec, seed, dtype=first.dtype))
