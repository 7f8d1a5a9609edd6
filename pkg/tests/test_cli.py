import csv
import json
from pathlib import Path

import numpy as np
import pytest

from radiomap import cli, datasets, grids, models, simulator
from radiomap.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, unet_flops
from radiomap.models import UNetSpec


def write_cfg(tmp_path, name, payload):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return str(p)


GEN_CFG = {
    "seed": 3,
    "n_maps": 4,
    "tx_per_map": 1,
    "size": 32,
    "scene": {"building_count": 4, "building_size_range": [4, 8],
              "car_count": 8, "margin": 2, "street_width": 3},
    "refined_samples": {"count": 20, "seed": 1},
}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = write_cfg(out, "gen.json", GEN_CFG)
    rc = cli.main(["gen-dataset", "--config", cfg, "--out", str(out / "data"),
                   "--force"])
    assert rc == EXIT_OK
    return out / "data"


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    cfg = write_cfg(out, "train.json", {
        "dataset": str(dataset_dir),
        "model": {"stage_channels": [4, 8], "seed": 0},
        "channels": {"use_cars": True},
        "split": {"fractions": [0.5, 0.25, 0.25], "seed": 1},
        "train": {"lr": 1e-3, "epochs": 2, "batch_size": 2, "seed": 2,
                  "fidelity_mode": "fixed_b", "dtype": "float32"},
    })
    rc = cli.main(["train", "--config", cfg, "--out", str(out)])
    assert rc == EXIT_OK
    return out


class TestGenDataset:
    def test_layout_and_counts(self, dataset_dir):
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert len(manifest["maps"]) == 4
        d0 = dataset_dir / "maps" / "0"
        names = {p.name for p in d0.iterdir()}
        assert {"buildings.pgm", "cars.pgm", "tx.json",
                "gain_coarse_a_t0.pgm", "gain_coarse_b_t0.pgm",
                "gain_refined_t0.pgm", "samples_refined_t0.json"} <= names
        assert (dataset_dir / "preview.png").exists()

    def test_refuses_nonempty_without_force(self, dataset_dir, tmp_path):
        cfg = write_cfg(tmp_path, "gen.json", GEN_CFG)
        rc = cli.main(["gen-dataset", "--config", cfg, "--out",
                       str(dataset_dir)])
        assert rc == EXIT_DATA

    def test_rerun_identical_checksums(self, dataset_dir, tmp_path):
        cfg = write_cfg(tmp_path, "gen.json", GEN_CFG)
        rc = cli.main(["gen-dataset", "--config", cfg, "--out",
                       str(tmp_path / "again"), "--force"])
        assert rc == EXIT_OK
        m1 = json.loads((dataset_dir / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
        assert m1["maps"] == m2["maps"]

    def test_manifest_stats_match_rescan(self, dataset_dir):
        assert datasets.verify_manifest(dataset_dir) == []

    def test_unknown_key_rejected(self, tmp_path):
        bad = dict(GEN_CFG)
        bad["n_mapz"] = 3
        cfg = write_cfg(tmp_path, "bad.json", bad)
        rc = cli.main(["gen-dataset", "--config", cfg, "--out",
                       str(tmp_path / "x"), "--force"])
        assert rc == EXIT_CONFIG


class TestTrain:
    def test_outputs(self, trained_dir):
        assert (trained_dir / "checkpoint.ckpt").exists()
        assert (trained_dir / "history.png").exists()
        with open(trained_dir / "history.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["phase", "epoch", "train_loss", "val_loss"]
        assert len(rows) == 3  # header + 2 epochs

    def test_checkpoint_metadata_has_split(self, trained_dir):
        meta = models.checkpoint_metadata(trained_dir / "checkpoint.ckpt")
        md = meta["metadata"]
        assert set(md["train_map_ids"]).isdisjoint(md["test_map_ids"])

    def test_missing_dataset_is_data_error(self, tmp_path):
        cfg = write_cfg(tmp_path, "t.json", {
            "dataset": str(tmp_path / "missing"),
            "model": {"stage_channels": [4, 8], "seed": 0},
            "split": {"seed": 1},
            "train": {"epochs": 1, "seed": 2},
        })
        assert cli.main(["train", "--config", cfg, "--out",
                         str(tmp_path)]) == EXIT_DATA

    def test_missing_seed_rejected(self, tmp_path, dataset_dir):
        cfg = write_cfg(tmp_path, "t.json", {
            "dataset": str(dataset_dir),
            "model": {"stage_channels": [4, 8], "seed": 0},
            "split": {"seed": 1},
            "train": {"epochs": 1},
        })
        assert cli.main(["train", "--config", cfg, "--out",
                         str(tmp_path)]) == EXIT_CONFIG

    def test_resume_reproduces_outputs_bit_exactly(self, trained_dir, dataset_dir):
        model = models.load_checkpoint(trained_dir / "checkpoint.ckpt")
        ds = datasets.load_dataset(dataset_dir)
        ch = datasets.ChannelConfig(use_cars=True)
        stack = datasets.build_input_stack(ds.scene_for(0, 0), ch)
        out1 = model.predict(stack)
        again = models.load_checkpoint(trained_dir / "checkpoint.ckpt")
        assert np.array_equal(again.predict(stack), out1)


class TestEval:
    def test_metrics_csv(self, trained_dir, dataset_dir, tmp_path):
        cfg = write_cfg(tmp_path, "e.json", {
            "dataset": str(dataset_dir),
            "checkpoint": str(trained_dir / "checkpoint.ckpt"),
            "split": {"fractions": [0.5, 0.25, 0.25], "seed": 1},
        })
        out = tmp_path / "eval"
        assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == EXIT_OK
        with open(out / "metrics.csv") as f:
            rows = list(csv.reader(f))
        # header + one per test sample + aggregate
        n_samples = len(rows) - 2
        assert rows[-1][0] == "aggregate"
        assert n_samples >= 1
        agg_rmse = float(rows[-1][4])
        per = [float(r[4]) ** 2 for r in rows[1:-1]]
        assert agg_rmse == pytest.approx(float(np.sqrt(np.mean(per))), rel=1e-9)
        assert (out / "strip.png").exists()

    def test_leakage_detected(self, trained_dir, dataset_dir, tmp_path):
        meta = models.checkpoint_metadata(trained_dir / "checkpoint.ckpt")
        cfg = write_cfg(tmp_path, "e.json", {
            "dataset": str(dataset_dir),
            "checkpoint": str(trained_dir / "checkpoint.ckpt"),
            # different split seed makes train ids land in test
            "split": {"fractions": [0.5, 0.25, 0.25], "seed": 99},
        })
        out = tmp_path / "eval2"
        rc = cli.main(["eval", "--config", cfg, "--out", str(out)])
        assert rc == EXIT_DATA

    def test_self_evaluation_zero_nmse(self, dataset_dir, tmp_path):
        # evaluating stored maps against themselves through a fake model is
        # covered by metrics tests; here: eval of a checkpoint against its
        # own predictions rendered as the dataset would be circular, so we
        # simply check NMSE of model vs itself is 0 via the library
        ds = datasets.load_dataset(dataset_dir)
        g = ds.maps[0].gains[simulator.COARSE_B][0]
        from radiomap.linkbudget import nmse
        assert nmse(g, g) == 0.0


class TestBench:
    def test_bench_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path, "b.json", {
            "seed": 1,
            "sizes": [16, 32],
            "reps": 5,
            "model": {"stage_channels": [4, 8], "seed": 0},
            "rbf_k": [16, 32],
            "tomography_size": 16,
            "completion_iters": 10,
        })
        out = tmp_path / "bench"
        assert cli.main(["bench", "--config", cfg, "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "bench.json").read_text())
        assert "unet_exponent" in summary and "rbf_exponent" in summary
        assert (out / "unet_scaling.png").exists()

    def test_flops_quadruple_on_doubling(self):
        spec = UNetSpec(2, (8, 16, 32))
        assert unet_flops(spec, 64) == 4 * unet_flops(spec, 32)
        assert unet_flops(spec, 128) == 4 * unet_flops(spec, 64)


class TestStrip:
    def test_compose(self, dataset_dir, tmp_path):
        cfg = write_cfg(tmp_path, "s.json", {
            "images": [str(dataset_dir / "maps" / "0" / "gain_coarse_a_t0.pgm"),
                       str(dataset_dir / "maps" / "0" / "gain_refined_t0.pgm")],
            "labels": ["a", "r"],
            "output": "cmp.png",
        })
        out = tmp_path / "strips"
        assert cli.main(["strip", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert (out / "cmp.png").exists()

    def test_missing_image_is_data_error(self, tmp_path):
        cfg = write_cfg(tmp_path, "s.json", {"images": ["/nope.pgm"]})
        assert cli.main(["strip", "--config", cfg, "--out",
                         str(tmp_path)]) == EXIT_DATA


class TestUsage:
    def test_bad_flag_exits_config(self):
        assert cli.main(["train", "--nope"]) == EXIT_CONFIG

    def test_invalid_json_config(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{not json")
        assert cli.main(["bench", "--config", str(p), "--out",
                         str(tmp_path)]) == EXIT_CONFIG
