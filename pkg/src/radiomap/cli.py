"""Command-line orchestration.

Subcommands: gen-dataset, train, adapt, train-coverage, eval, baseline,
localize, coverage, bench, strip. Every command takes a strict JSON
config (unknown keys rejected, all seeds explicit) and writes CSV/JSON
results plus PNG figures (and PGM rasters where maps are emitted) into
the --out directory.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import os

# cap BLAS parallelism before numpy loads anything
_threads = os.environ.get("RADIOMAP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import apps, baselines, datasets, figures, grids, models, simulator, training
from .linkbudget import LinkBudget, evaluate, nmse as nmse_of, scale_db_per_gray
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 1)."""


class DataError(RuntimeError):
    """Missing or inconsistent data on disk (exit code 2)."""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# --- config plumbing ---------------------------------------------------------

def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e


def _check_keys(cfg: dict, allowed: dict, where: str) -> None:
    """Reject unknown keys; recurse into nested dicts whose schema is a dict."""
    for key, val in cfg.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {where}{key!r} "
                              f"(allowed: {sorted(allowed)})")
        sub = allowed[key]
        if isinstance(sub, dict) and isinstance(val, dict):
            _check_keys(val, sub, f"{where}{key}.")


def _need(cfg: dict, key: str, where: str = ""):
    if key not in cfg:
        raise ConfigError(f"missing required key {where}{key!r}")
    return cfg[key]


_SCENE_KEYS = {"building_count": 1, "building_size_range": 1, "car_count": 1,
               "margin": 1, "street_width": 1}
_TRAIN_KEYS = {"lr": 1, "betas": 1, "eps": 1, "epochs": 1, "batch_size": 1,
               "seed": 1, "fidelity_mode": 1, "select_on_validation": 1,
               "dtype": 1}
_CHANNEL_KEYS = {"use_cars": 1, "use_samples": 1, "k_min": 1, "k_max": 1,
                 "sample_seed": 1}
_SPLIT_KEYS = {"fractions": 1, "seed": 1}
_MODEL_KEYS = {"stage_channels": 1, "kernel_size": 1, "seed": 1}


def _scene_params(cfg: dict) -> grids.SceneParams:
    base = grids.SceneParams()
    return grids.SceneParams(
        building_count=cfg.get("building_count", base.building_count),
        building_size_range=tuple(cfg.get("building_size_range",
                                          base.building_size_range)),
        car_count=cfg.get("car_count", base.car_count),
        margin=cfg.get("margin", base.margin),
        street_width=cfg.get("street_width", base.street_width),
    )


def _train_config(cfg: dict) -> TrainConfig:
    if "seed" not in cfg:
        raise ConfigError("train.seed must be explicit")
    kw = dict(cfg)
    if "betas" in kw:
        kw["betas"] = tuple(kw["betas"])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}") from e


def _channels(cfg: dict) -> datasets.ChannelConfig:
    if cfg.get("use_samples") and "sample_seed" not in cfg:
        raise ConfigError("channels.sample_seed must be explicit when "
                          "use_samples is set")
    return datasets.ChannelConfig(
        use_cars=cfg.get("use_cars", True),
        use_samples=cfg.get("use_samples", False),
        k_min=cfg.get("k_min", 1),
        k_max=cfg.get("k_max", 50),
        sample_seed=cfg.get("sample_seed", 0),
    )


def _split(ds: datasets.RadioDataset, cfg: dict) -> grids.DatasetSplit:
    fractions = tuple(cfg.get("fractions", (0.6, 0.2, 0.2)))
    if "seed" not in cfg:
        raise ConfigError("split.seed must be explicit")
    return grids.split_maps(len(ds.maps), fractions, cfg["seed"])


def _load_dataset(path) -> datasets.RadioDataset:
    try:
        return datasets.load_dataset(path)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# --- gen-dataset -------------------------------------------------------------

_GEN_SCHEMA = {"seed": 1, "n_maps": 1, "tx_per_map": 1, "size": 1,
               "scene": _SCENE_KEYS,
               "fidelities": 1,
               "sim": {"wall_db_per_pixel": 1, "car_db_per_pixel": 1,
                       "bend_penalty_db": 1, "corner_candidate_stride": 1},
               "linkbudget": {"p_tx_dbm": 1, "n0_dbm_per_hz": 1, "bandwidth_hz": 1,
                              "nf_db": 1, "m1_db": 1, "pl_trnc_db": 1},
               "refined_samples": {"count": 1, "seed": 1}}


def cmd_gen_dataset(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _GEN_SCHEMA, "")
    seed = args.seed if args.seed is not None else _need(cfg, "seed")
    out = _out_dir(args)
    if any(out.iterdir()) and not args.force:
        raise DataError(f"output dir {out} is not empty (use --force)")
    sim = cfg.get("sim", {})
    refined = cfg.get("refined_samples", {})
    if refined and "seed" not in refined:
        raise ConfigError("refined_samples.seed must be explicit")
    dcfg = datasets.DatasetConfig(
        seed=seed,
        n_maps=cfg.get("n_maps", 20),
        tx_per_map=cfg.get("tx_per_map", 2),
        size=cfg.get("size", 64),
        scene=_scene_params(cfg.get("scene", {})),
        fidelities=tuple(cfg.get("fidelities", simulator.FIDELITY_KINDS)),
        wall_db_per_pixel=sim.get("wall_db_per_pixel", 2.0),
        car_db_per_pixel=sim.get("car_db_per_pixel", 1.0),
        bend_penalty_db=sim.get("bend_penalty_db", 15.0),
        corner_candidate_stride=sim.get("corner_candidate_stride", 2),
        refined_sample_count=refined.get("count", 100),
        refined_sample_seed=refined.get("seed", 1),
    )
    lb = LinkBudget(**cfg.get("linkbudget", {}))
    t0 = time.time()
    ds = datasets.generate_dataset(dcfg, lb)
    datasets.save_dataset(ds, out)
    first = ds.maps[0]
    preview = [first.scene.buildings.astype(float)]
    labels = ["buildings"]
    for kind in ds.config.fidelities:
        preview.append(first.gains[kind][0])
        labels.append(kind)
    figures.save_strip(preview, labels, out / "preview.png")
    print(f"wrote {len(ds.maps)} maps x {dcfg.tx_per_map} tx to {out} "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK


# --- train -------------------------------------------------------------------

_TRAIN_SCHEMA = {"dataset": 1, "model": dict(_MODEL_KEYS, retrospective=1,
                                             second_stage_channels=1,
                                             second_seed=1),
                 "channels": _CHANNEL_KEYS, "split": _SPLIT_KEYS,
                 "train": _TRAIN_KEYS, "init_from": 1}


def _history_rows(history):
    return [(h.get("phase", 0), h["epoch"], h["train_loss"], h["val_loss"])
            for h in history]


def _target_fidelities(ds, map_ids, mode, seed):
    if mode == training.FIXED_A:
        return simulator.COARSE_A
    if mode == training.FIXED_B:
        return simulator.COARSE_B
    keys = [(m, j) for m in map_ids for j in range(len(ds.maps[m].tx_list))]
    kinds = training.pick_fidelities(len(keys), mode, seed)
    return dict(zip(keys, kinds))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _TRAIN_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    channels = _channels(cfg.get("channels", {}))
    tcfg = _train_config(_need(cfg, "train"))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    mcfg = _need(cfg, "model")
    if "seed" not in mcfg:
        raise ConfigError("model.seed must be explicit")

    fid_seed = tcfg.seed + 91
    train_fids = _target_fidelities(ds, split.train_map_ids, tcfg.fidelity_mode, fid_seed)
    val_fid = (simulator.COARSE_A if tcfg.fidelity_mode == training.FIXED_A
               else simulator.COARSE_B)
    try:
        train_set = datasets.assemble_samples(ds, split.train_map_ids, train_fids, channels)
        val_set = datasets.assemble_samples(ds, split.val_map_ids, val_fid, channels)
    except (KeyError, ValueError) as e:
        raise DataError(f"cannot assemble samples: {e}") from e

    spec = models.UNetSpec(in_channels=channels.channel_count,
                           stage_channels=tuple(mcfg["stage_channels"]),
                           kernel_size=mcfg.get("kernel_size", 3))
    dtype = np.dtype(tcfg.dtype)
    if cfg.get("init_from"):
        model = models.load_checkpoint(cfg["init_from"])
        if model.spec != spec:
            raise ConfigError("init_from checkpoint spec differs from model config")
    else:
        model = models.UNet(spec, mcfg["seed"], dtype=dtype)
    history = training.train_supervised(model, train_set, val_set, tcfg)

    if mcfg.get("retrospective"):
        second_spec = models.UNetSpec(
            in_channels=spec.in_channels + 1,
            stage_channels=tuple(mcfg.get("second_stage_channels",
                                          mcfg["stage_channels"])),
            kernel_size=spec.kernel_size)
        wspec = models.WNetSpec(spec, second_spec, models.WNET_RETROSPECTIVE)
        wnet = models.WNet(wspec, mcfg["seed"], dtype=dtype, first=model,
                           second=models.UNet(second_spec,
                                              mcfg.get("second_seed", mcfg["seed"] + 1),
                                              dtype=dtype))
        hist2 = training.train_wnet_phase2(wnet, train_set, val_set, tcfg)
        for h in hist2:
            h["phase"] = 1
        history += hist2
        model = wnet

    meta = {"train_map_ids": list(split.train_map_ids),
            "val_map_ids": list(split.val_map_ids),
            "test_map_ids": list(split.test_map_ids),
            "channels": channels.__dict__,
            "fidelity_mode": tcfg.fidelity_mode,
            "dataset_seed": ds.config.seed}
    models.save_checkpoint(model, out / "checkpoint.ckpt", metadata=meta)
    _write_csv(out / "history.csv", ("phase", "epoch", "train_loss", "val_loss"),
               _history_rows(history))
    figures.save_history(history, out / "history.png")
    final = {"final_val_loss": history[-1]["val_loss"],
             "best_val_loss": min(h["val_loss"] for h in history),
             "param_count": model.param_count()}
    (out / "metrics.json").write_text(json.dumps(final, indent=1))
    print(f"trained {model.kind} ({model.param_count()} params), best val loss "
          f"{final['best_val_loss']:.6f}")
    return EXIT_OK


# --- adapt ---------------------------------------------------------------

_ADAPT_SCHEMA = {"dataset": 1, "checkpoint": 1,
                 "second_model": dict(_MODEL_KEYS), "split": _SPLIT_KEYS,
                 "train": _TRAIN_KEYS}


def cmd_adapt(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _ADAPT_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    tcfg = _train_config(_need(cfg, "train"))
    first = models.load_checkpoint(_need(cfg, "checkpoint"))
    if first.kind == "wnet":
        first = first.first
    channels = datasets.ChannelConfig(**models.checkpoint_metadata(
        cfg["checkpoint"]).get("metadata", {}).get("channels",
                                                   {"use_cars": True}))
    smcfg = _need(cfg, "second_model")
    if "seed" not in smcfg:
        raise ConfigError("second_model.seed must be explicit")
    second_spec = models.UNetSpec(in_channels=first.spec.in_channels + 1,
                                  stage_channels=tuple(smcfg["stage_channels"]),
                                  kernel_size=smcfg.get("kernel_size", 3))
    wspec = models.WNetSpec(first.spec, second_spec, models.WNET_ADAPTATION)
    wnet = models.WNet(wspec, first.seed, dtype=first.dtype, first=first,
                       second=models.UNet(second_spec, smcfg["seed"],
                                          dtype=first.dtype))
    try:
        sparse_train = datasets.assemble_sparse_samples(ds, split.train_map_ids, channels)
        dense_val = datasets.assemble_samples(ds, split.val_map_ids,
                                              simulator.REFINED, channels)
        dense_test = datasets.assemble_samples(ds, split.test_map_ids,
                                               simulator.REFINED, channels)
    except ValueError as e:
        raise DataError(str(e)) from e

    zero_shot = training.dense_mse(first, dense_test)
    history = training.adapt_to_refined(wnet, sparse_train, dense_val, tcfg)
    adapted = training.dense_mse(wnet, dense_test)
    meta = {"train_map_ids": list(split.train_map_ids),
            "val_map_ids": list(split.val_map_ids),
            "test_map_ids": list(split.test_map_ids),
            "channels": channels.__dict__}
    models.save_checkpoint(wnet, out / "checkpoint.ckpt", metadata=meta)
    _write_csv(out / "history.csv", ("phase", "epoch", "train_loss", "val_loss"),
               _history_rows(history))
    figures.save_history(history, out / "history.png")
    (out / "metrics.json").write_text(json.dumps(
        {"zero_shot_test_mse": zero_shot, "adapted_test_mse": adapted}, indent=1))
    print(f"zero-shot refined MSE {zero_shot:.6f} -> adapted {adapted:.6f}")
    return EXIT_OK


# --- train-coverage --------------------------------------------------------

_COV_TRAIN_SCHEMA = {"dataset": 1, "checkpoint": 1,
                     "second_model": dict(_MODEL_KEYS), "split": _SPLIT_KEYS,
                     "train": _TRAIN_KEYS, "threshold": 1, "alphas": 1,
                     "target_fidelity": 1}


def cmd_train_coverage(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _COV_TRAIN_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    tcfg = _train_config(_need(cfg, "train"))
    threshold = cfg.get("threshold", 0.5)
    alphas = cfg.get("alphas", [1, 2, 4, 8, 16, 32, 64, 128])
    fid = cfg.get("target_fidelity", simulator.COARSE_B)
    first = models.load_checkpoint(_need(cfg, "checkpoint"))
    if first.kind == "wnet":
        first = first.first
    channels = datasets.ChannelConfig(**models.checkpoint_metadata(
        cfg["checkpoint"]).get("metadata", {}).get("channels",
                                                   {"use_cars": True}))
    smcfg = _need(cfg, "second_model")
    if "seed" not in smcfg:
        raise ConfigError("second_model.seed must be explicit")
    second_spec = models.UNetSpec(in_channels=first.spec.in_channels + 1,
                                  stage_channels=tuple(smcfg["stage_channels"]),
                                  kernel_size=smcfg.get("kernel_size", 3))
    wspec = models.WNetSpec(first.spec, second_spec, models.WNET_THRESHOLDER)
    wnet = models.WNet(wspec, first.seed, dtype=first.dtype, first=first,
                       second=models.UNet(second_spec, smcfg["seed"],
                                          dtype=first.dtype))
    train_set = datasets.assemble_samples(ds, split.train_map_ids, fid, channels)
    val_set = datasets.assemble_samples(ds, split.val_map_ids, fid, channels)
    test_set = datasets.assemble_samples(ds, split.test_map_ids, fid, channels)
    history = training.coverage_curriculum(wnet, train_set, val_set, threshold,
                                           alphas, tcfg)
    accs = []
    for s in test_set:
        pred = wnet.predict(s.inputs)
        truth = apps.hard_coverage(s.target, threshold)
        accs.append(apps.coverage_metrics(pred, truth)["pixel_accuracy"])
    meta = {"threshold": threshold, "alphas": list(alphas),
            "train_map_ids": list(split.train_map_ids),
            "test_map_ids": list(split.test_map_ids),
            "channels": channels.__dict__, "target_fidelity": fid}
    models.save_checkpoint(wnet, out / "checkpoint.ckpt", metadata=meta)
    _write_csv(out / "history.csv", ("stage", "alpha", "epoch", "train_loss",
                                     "val_loss"),
               [(h["stage"], h["alpha"], h["epoch"], h["train_loss"],
                 h["val_loss"]) for h in history])
    figures.save_history(history, out / "history.png")
    (out / "metrics.json").write_text(json.dumps(
        {"test_pixel_accuracy": float(np.mean(accs)), "threshold": threshold},
        indent=1))
    print(f"coverage thresholder trained; test accuracy {np.mean(accs):.4f}")
    return EXIT_OK


# --- eval ----------------------------------------------------------------

_EVAL_SCHEMA = {"dataset": 1, "checkpoint": 1, "split": _SPLIT_KEYS,
                "target_fidelity": 1, "eval_k": 1, "eval_sample_seed": 1}


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _EVAL_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    model = models.load_checkpoint(_need(cfg, "checkpoint"))
    meta = getattr(model, "metadata", {})
    trained_on = set(meta.get("train_map_ids", []))
    leaked = trained_on & set(split.test_map_ids)
    if leaked:
        raise DataError(f"split leakage: test map ids {sorted(leaked)} were "
                        f"in the checkpoint's training set")
    channels = datasets.ChannelConfig(**meta.get("channels", {"use_cars": True}))
    if channels.use_samples:
        k = cfg.get("eval_k", channels.k_max)
        if "eval_sample_seed" not in cfg:
            raise ConfigError("eval_sample_seed must be explicit for "
                              "measurement-channel models")
        channels = datasets.ChannelConfig(
            use_cars=channels.use_cars, use_samples=True, k_min=k, k_max=k,
            sample_seed=cfg["eval_sample_seed"])
    fid = cfg.get("target_fidelity", simulator.COARSE_B)
    test_set = datasets.assemble_samples(ds, split.test_map_ids, fid, channels)
    lb = ds.lb
    rows = []
    ses = []
    for s in test_set:
        pred = model.predict(s.inputs)
        m = evaluate(lb, pred, s.target)
        rows.append((s.map_id, s.tx_index, fid, m.nmse, m.rmse_gray, m.rmse_db))
        ses.append(m.rmse_gray ** 2)
    agg_rmse = float(np.sqrt(np.mean(ses)))
    agg_nmse = float(np.mean([r[3] for r in rows]))
    rows.append(("aggregate", "", fid, agg_nmse, agg_rmse,
                 agg_rmse * scale_db_per_gray(lb)))
    _write_csv(out / "metrics.csv",
               ("map_id", "tx_index", "fidelity", "nmse", "rmse_gray", "rmse_db"),
               rows)
    s0 = test_set[0]
    figures.save_strip([s0.target, model.predict(s0.inputs)],
                       ["ground truth", "estimate"], out / "strip.png")
    print(f"{len(test_set)} samples: aggregate NMSE {agg_nmse:.5f}, "
          f"RMSE {agg_rmse:.5f} gray ({agg_rmse * scale_db_per_gray(lb):.3f} dB)")
    return EXIT_OK


# --- baseline ---------------------------------------------------------------

_BASE_SCHEMA = {"dataset": 1, "split": _SPLIT_KEYS, "k_list": 1, "seed": 1,
                "target_fidelity": 1, "checkpoint_s": 1, "checkpoint_c": 1,
                "methods": 1, "completion": {"tau": 1, "iters": 1},
                "mlp": {"map_id": 1, "tx_count": 1, "tx_seed": 1, "split": 1,
                        "train": _TRAIN_KEYS, "hidden_sizes": 1, "model_seed": 1}}


def _eval_case_list(ds, map_ids, fid):
    cases = []
    for mid in map_ids:
        rec = ds.maps[mid]
        for j in range(len(rec.tx_list)):
            cases.append((mid, j, ds.scene_for(mid, j), rec.gains[fid][j]))
    return cases


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _BASE_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    seed = args.seed if args.seed is not None else _need(cfg, "seed")
    k_list = cfg.get("k_list", [5, 10, 20, 50])
    fid = cfg.get("target_fidelity", simulator.COARSE_B)
    methods = cfg.get("methods", ["rbf", "completion", "tomography"])
    cases = _eval_case_list(ds, split.test_map_ids, fid)
    lb = ds.lb
    rows = []

    def add_row(method, k, errs, seconds):
        rows.append((method, k, float(np.mean(errs)), seconds))

    model_s = models.load_checkpoint(cfg["checkpoint_s"]) if cfg.get("checkpoint_s") else None
    model_c = models.load_checkpoint(cfg["checkpoint_c"]) if cfg.get("checkpoint_c") else None

    for k in k_list:
        per_method: dict[str, list[float]] = {m: [] for m in methods}
        times: dict[str, float] = {m: 0.0 for m in methods}
        s_errs: list[float] = []
        s_time = 0.0
        for i, (mid, j, scene, gain) in enumerate(cases):
            sp = training.sample_measurements(gain, scene, k,
                                              seed=seed + 17 * i + k)
            if "rbf" in methods:
                t0 = time.time()
                est = baselines.rbf_interpolate(sp, scene)
                times["rbf"] += time.time() - t0
                per_method["rbf"].append(nmse_of(est, gain))
            if "completion" in methods:
                comp = cfg.get("completion", {})
                t0 = time.time()
                est, _ = baselines.matrix_complete(sp, scene,
                                                   tau=comp.get("tau"),
                                                   iters=comp.get("iters", 150))
                times["completion"] += time.time() - t0
                per_method["completion"].append(nmse_of(est, gain))
            if "tomography" in methods:
                t0 = time.time()
                tom = baselines.tomography_fit(scene, scene.tx, sp, lb)
                est = baselines.tomography_predict(scene, scene.tx, tom, lb)
                times["tomography"] += time.time() - t0
                per_method["tomography"].append(nmse_of(est, gain))
            if model_s is not None:
                meta = getattr(model_s, "metadata", {})
                ch = datasets.ChannelConfig(**meta.get("channels", {}))
                t0 = time.time()
                stack = datasets.build_input_stack(scene, ch, sp)
                est = model_s.predict(stack)
                s_time += time.time() - t0
                s_errs.append(nmse_of(est, gain))
        for m in methods:
            add_row(m, k, per_method[m], times[m] / len(cases))
        if model_s is not None:
            add_row("unet_s", k, s_errs, s_time / len(cases))

    if model_c is not None:
        meta = getattr(model_c, "metadata", {})
        ch = datasets.ChannelConfig(**meta.get("channels", {"use_cars": True}))
        errs = []
        t0 = time.time()
        for mid, j, scene, gain in cases:
            est = model_c.predict(datasets.build_input_stack(scene, ch))
            errs.append(nmse_of(est, gain))
        add_row("unet_c", None, errs, (time.time() - t0) / len(cases))

    if cfg.get("mlp"):
        mcfg = cfg["mlp"]
        mid = mcfg.get("map_id", split.test_map_ids[0])
        rec = ds.maps[mid]
        tx_count = mcfg.get("tx_count", 28)
        tx_list = grids.draw_tx_locations(rec.scene.buildings, tx_count,
                                          seed=mcfg.get("tx_seed", seed + 7))
        fids = [ds.config.fidelity(fid)]
        gains = {}
        for tx in tx_list:
            placed = rec.scene.with_tx(tx)
            gains[tx] = simulator.simulate_many(placed, fids, lb)[fid]
        n_tr, n_va = mcfg.get("split", [20, 4, 4])[:2]
        tcfg = _train_config(mcfg.get("train", {"seed": seed}))
        mlp, _ = baselines.train_mlp_baseline(
            rec.scene, gains, (tx_list[:n_tr], tx_list[n_tr:n_tr + n_va],
                               tx_list[n_tr + n_va:]), tcfg,
            spec=models.MlpSpec(tuple(mcfg.get("hidden_sizes", (128, 128, 128)))),
            model_seed=mcfg.get("model_seed", seed))
        errs = []
        t0 = time.time()
        for tx in tx_list[n_tr + n_va:]:
            est = mlp.render_map(tx, rec.scene.shape[0])
            est[rec.scene.buildings > 0] = 0.0
            ref = gains[tx].copy()
            errs.append(nmse_of(est, ref))
        add_row("mlp", None, errs, (time.time() - t0) / max(len(errs), 1))

    _write_csv(out / "baseline.csv", ("method", "k", "nmse", "seconds_per_map"),
               rows)
    figures.save_error_vs_k([(m, k, v) for m, k, v, _ in rows],
                            out / "error_vs_k.png")
    for m, k, v, _ in rows:
        print(f"{m:12s} k={k!s:>5} NMSE {v:.5f}")
    return EXIT_OK


# --- localize ---------------------------------------------------------------

_LOC_SCHEMA = {"dataset": 1, "checkpoint": 1, "split": _SPLIT_KEYS,
               "target_fidelity": 1, "k_maps": 1, "subset_size": 1,
               "trials": 1, "eps": 1, "problems": 1, "seed": 1,
               "coverage_floor": 1}


def cmd_localize(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _LOC_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    seed = args.seed if args.seed is not None else _need(cfg, "seed")
    fid_kind = cfg.get("target_fidelity", simulator.COARSE_B)
    model = models.load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    results = run_localization_problems(
        ds, split.test_map_ids, model, fid_kind,
        k_maps=cfg.get("k_maps", 10), subset_size=cfg.get("subset_size", 5),
        trials=cfg.get("trials", 5), eps=cfg.get("eps", 0.03),
        n_problems=cfg.get("problems", 50), seed=seed,
        coverage_floor=cfg.get("coverage_floor", 0.2))
    errors = [r["error_m"] for r in results if r["error_m"] is not None]
    report = {"problems": results,
              "median_error_m": float(np.median(errors)) if errors else None,
              "failures": sum(1 for r in results if r["error_m"] is None)}
    (out / "localization.json").write_text(json.dumps(report, indent=1))
    ok = [r for r in results if r["error_m"] is not None]
    if ok:
        first = ok[0]
        rec = ds.maps[first["map_id"]]
        figures.save_localization(rec.scene.buildings, None,
                                  first["true"], first["estimate"],
                                  first["tx_points"], out / "localization.png")
    med = report["median_error_m"]
    print(f"{len(ok)}/{len(results)} problems localized, median error "
          f"{med if med is None else round(med, 3)} m")
    return EXIT_OK


def run_localization_problems(ds, map_ids, model, fid_kind, k_maps, subset_size,
                              trials, eps, n_problems, seed,
                              coverage_floor=0.2):
    """Repeated fingerprint localizations on held-out scenes.

    Per problem: draw a scene, k_maps extra transmitters, simulate their
    true maps, read reports at a random in-coverage receiver, estimate the
    maps (model, or the true maps when model is None), and localize."""
    lb = ds.lb
    fid = ds.config.fidelity(fid_kind)
    meta = getattr(model, "metadata", {}) if model is not None else {}
    ch = datasets.ChannelConfig(**meta.get("channels", {"use_cars": True}))
    rng = np.random.default_rng(seed)
    results = []
    for pi in range(n_problems):
        mid = int(rng.choice(list(map_ids)))
        rec = ds.maps[mid]
        tx_points = grids.draw_tx_locations(rec.scene.buildings, k_maps,
                                            seed=seed + 1009 * pi)
        true_maps = []
        est_maps = []
        for tx in tx_points:
            placed = rec.scene.with_tx(tx)
            gain = simulator.simulate(placed, fid, lb)
            true_maps.append(gain)
            if model is None:
                est_maps.append(gain)
            else:
                est_maps.append(model.predict(
                    datasets.build_input_stack(placed, ch)))
        # receiver must be outdoors and in coverage of every report
        covered = rec.scene.buildings == 0
        for g in true_maps:
            covered &= g > coverage_floor
        idx = np.argwhere(covered)
        if idx.shape[0] == 0:
            results.append({"problem": pi, "map_id": mid, "error_m": None,
                            "note": "no jointly covered receiver pixel",
                            "tx_points": [list(t) for t in tx_points]})
            continue
        ry, rx = idx[int(rng.integers(idx.shape[0]))]
        true_pos = (int(ry), int(rx))
        reports = [float(g[true_pos]) for g in true_maps]
        problem = apps.LocalizationProblem(
            maps=est_maps, reports=reports, eps=eps, subset_size=subset_size,
            trials=trials, seed=seed + 31 * pi, buildings=rec.scene.buildings)
        entry = {"problem": pi, "map_id": mid, "true": list(true_pos),
                 "tx_points": [list(t) for t in tx_points]}
        try:
            res = apps.localize(problem)
            err = float(np.hypot(res.estimate[0] - true_pos[0],
                                 res.estimate[1] - true_pos[1]))
            entry.update({"estimate": list(res.estimate),
                          "variance": res.variance, "error_m": err,
                          "chosen_trial": res.chosen_trial,
                          "trials": res.trial_log})
        except apps.NoLocalizationError:
            entry.update({"estimate": None, "error_m": None,
                          "note": "all trials empty"})
        results.append(entry)
    return results


# --- coverage ---------------------------------------------------------------

_COVERAGE_SCHEMA = {"dataset": 1, "checkpoint": 1, "split": _SPLIT_KEYS,
                    "threshold": 1, "target_fidelity": 1}


def cmd_coverage(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _COVERAGE_SCHEMA, "")
    out = _out_dir(args)
    ds = _load_dataset(_need(cfg, "dataset"))
    split = _split(ds, _need(cfg, "split"))
    model = models.load_checkpoint(_need(cfg, "checkpoint"))
    meta = getattr(model, "metadata", {})
    threshold = cfg.get("threshold", meta.get("threshold", 0.5))
    fid = cfg.get("target_fidelity", meta.get("target_fidelity",
                                              simulator.COARSE_B))
    channels = datasets.ChannelConfig(**meta.get("channels", {"use_cars": True}))
    test_set = datasets.assemble_samples(ds, split.test_map_ids, fid, channels)
    rows = []
    (out / "maps").mkdir(exist_ok=True)
    for i, s in enumerate(test_set):
        pred = model.predict(s.inputs)
        truth = apps.hard_coverage(s.target, threshold)
        m = apps.coverage_metrics(pred, truth)
        rows.append((s.map_id, s.tx_index, m["rmse"], m["pixel_accuracy"]))
        grids.save_pgm(pred, out / "maps" / f"coverage_{s.map_id}_t{s.tx_index}.pgm")
        if i == 0:
            figures.save_strip([s.target, truth.grid.astype(float), pred],
                               ["gain", f"coverage T={threshold}", "estimate"],
                               out / "strip.png")
    agg = (float(np.mean([r[2] for r in rows])),
           float(np.mean([r[3] for r in rows])))
    rows.append(("aggregate", "", agg[0], agg[1]))
    _write_csv(out / "metrics.csv",
               ("map_id", "tx_index", "rmse", "pixel_accuracy"), rows)
    print(f"coverage on {len(test_set)} samples: RMSE {agg[0]:.4f}, "
          f"accuracy {agg[1]:.4f}")
    return EXIT_OK


# --- bench -------------------------------------------------------------------

_BENCH_SCHEMA = {"sizes": 1, "reps": 1, "model": dict(_MODEL_KEYS),
                 "rbf_k": 1, "completion_iters": 1, "tomography_size": 1,
                 "seed": 1}


def _median_time(fn, reps) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)),
                            np.log(np.asarray(ys, float)), 1)[0])


def unet_flops(spec: models.UNetSpec, n: int) -> int:
    """Multiply-add count of all convolutions at input size n (x2 for ops)."""
    total = 0
    size = n
    ch = spec.stage_channels
    k = spec.kernel_size
    prev = spec.in_channels
    for i, c in enumerate(ch):
        total += 2 * size * size * k * k * (prev * c + c * c)
        prev = c
        if i < len(ch) - 1:
            size //= 2
    for i in range(len(ch) - 2, -1, -1):
        size *= 2
        cin = ch[i] + ch[i + 1]
        total += 2 * size * size * k * k * (cin * ch[i] + ch[i] * ch[i])
    total += 2 * n * n * ch[0] * spec.out_channels
    return total


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _BENCH_SCHEMA, "")
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else _need(cfg, "seed")
    sizes = cfg.get("sizes", [32, 64, 128])
    reps = max(int(cfg.get("reps", 5)), 5)
    mcfg = cfg.get("model", {"stage_channels": [8, 16, 32, 64], "seed": 0})
    spec = models.UNetSpec(in_channels=2,
                           stage_channels=tuple(mcfg["stage_channels"]),
                           kernel_size=mcfg.get("kernel_size", 3))
    net = models.UNet(spec, mcfg.get("seed", 0), dtype=np.float32)
    rng = np.random.default_rng(seed)
    rows = []
    unet_pts = []
    for n in sizes:
        x = rng.standard_normal((1, 2, n, n)).astype(np.float32)
        net.predict(x)  # warm up
        t = _median_time(lambda: net.predict(x), reps)
        rows.append(("unet_infer", n, t, unet_flops(spec, n)))
        unet_pts.append((n, t))
    unet_exp = _loglog_slope([p[0] for p in unet_pts], [p[1] for p in unet_pts])

    rbf_pts = []
    for k in cfg.get("rbf_k", [32, 64, 128]):
        pts = rng.integers(0, 64, size=(k, 2))
        pts = np.unique(pts, axis=0)
        while pts.shape[0] < k:
            extra = rng.integers(0, 64, size=(k, 2))
            pts = np.unique(np.concatenate([pts, extra]), axis=0)
        pts = pts[:k]
        vals = rng.uniform(0.1, 1.0, size=k)
        sp = training.SparseSamples(pts, vals)
        scene = grids.Scene(np.zeros((64, 64), np.uint8),
                            np.zeros((64, 64), np.uint8), (0, 0))
        t = _median_time(lambda: baselines.rbf_interpolate(sp, scene, c=1.0), reps)
        rows.append(("rbf_solve", k, t, None))
        rbf_pts.append((k, t))
    rbf_exp = _loglog_slope([p[0] for p in rbf_pts], [p[1] for p in rbf_pts])

    tn = cfg.get("tomography_size", 32)
    scene = grids.random_scene(seed, tn, grids.SceneParams(building_count=5))
    tom = baselines.TomographyModel(2.0)
    lb = LinkBudget()
    t = _median_time(lambda: baselines.tomography_predict(scene, scene.tx, tom, lb),
                     reps)
    rows.append(("tomography_map", tn, t, None))

    iters = cfg.get("completion_iters", 50)
    gain = simulator.simulate(scene, simulator.Fidelity(simulator.COARSE_A), lb)
    n_free = int(np.sum(scene.buildings == 0))
    sp = training.sample_measurements(gain, scene, n_free // 2, seed=seed)
    t = _median_time(lambda: baselines.matrix_complete(sp, scene, iters=iters), reps)
    rows.append(("completion_run", iters, t, None))

    flops = {n: unet_flops(spec, n) for n in sizes}
    summary = {"unet_exponent": unet_exp, "rbf_exponent": rbf_exp,
               "unet_flops": flops}
    _write_csv(out / "bench.csv", ("what", "size", "median_seconds", "flops"),
               rows)
    (out / "bench.json").write_text(json.dumps(summary, indent=1))
    figures.save_scaling(unet_pts, unet_exp, out / "unet_scaling.png", xlabel="n")
    figures.save_scaling(rbf_pts, rbf_exp, out / "rbf_scaling.png", xlabel="k",
                         title="rbf solve scaling")
    print(f"unet inference exponent {unet_exp:.2f}; rbf solve exponent "
          f"{rbf_exp:.2f}")
    return EXIT_OK


# --- strip helper ------------------------------------------------------------

_STRIP_SCHEMA = {"images": 1, "labels": 1, "output": 1}


def cmd_strip(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _STRIP_SCHEMA, "")
    out = _out_dir(args)
    paths = _need(cfg, "images")
    if not paths:
        raise ConfigError("images list is empty")
    imgs = []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"image {p} does not exist")
        imgs.append(grids.load_pgm(p))
    labels = cfg.get("labels", [Path(p).stem for p in paths])
    figures.save_strip(imgs, labels, out / cfg.get("output", "strip.png"))
    print(f"wrote strip of {len(imgs)} panels")
    return EXIT_OK


# --- entry -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


_COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "train-coverage": cmd_train_coverage,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "localize": cmd_localize,
    "coverage": cmd_coverage,
    "bench": cmd_bench,
    "strip": cmd_strip,
}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radiomap",
                     description="radio map estimation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's top-level seed")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (apps.NoLocalizationError, baselines.SingularSystemError,
            FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
