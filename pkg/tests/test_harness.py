import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lora_dropout_lab import rng as rngmod
from lora_dropout_lab.checkpoint import check_widths, dumps, load_checkpoint, save_checkpoint
from lora_dropout_lab.config import ExperimentConfig, child_seed
from lora_dropout_lab.data import DatasetSpec, class_centers, generate_dataset
from lora_dropout_lab.errors import CheckpointError, ConfigError, DimensionError
from lora_dropout_lab.model import Model, mlp, with_adapters
from lora_dropout_lab.parallel import parallel_map, thread_count
from lora_dropout_lab.pipeline import build_datasets, finetune, pretrain
from lora_dropout_lab.reporting import csv_text, dumps_json, line_chart
from lora_dropout_lab.theory.checks import random_lora_mlp
from lora_dropout_lab.training import train, TrainConfig


class TestGenerateDataset:
    def test_noiseless_points_sit_on_centers(self):
        spec = DatasetSpec(noise=0.0, n=50, seed=3)
        ds = generate_dataset(spec)
        np.testing.assert_array_equal(ds.features, class_centers(spec)[ds.labels])

    def test_noiseless_is_solvable(self):
        spec = DatasetSpec(noise=0.0, K=3, dim=4, seed=1)
        tr = generate_dataset(spec.with_split("finetune-train", 60))
        model = mlp([4, 8, 3], rngmod.derive(0, 1))
        rec = train(model, tr, tr, TrainConfig(epochs=60, mode="plain", optimizer="adam", lr=0.05))
        assert rec.final.train_acc == 1.0

    def test_bit_identical_regeneration(self):
        spec = DatasetSpec(n=33, seed=9, shift_angle=17.0, shift_translation=0.5)
        a, b = generate_dataset(spec), generate_dataset(spec)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_zero_shift_is_control(self):
        spec = DatasetSpec(shift_angle=0.0, seed=4)
        pre = class_centers(spec.with_split("pretrain", 10))
        ft = class_centers(spec.with_split("finetune-test", 10))
        assert np.array_equal(pre, ft)

    def test_shift_rotates_centers(self):
        spec = DatasetSpec(shift_angle=90.0, seed=4)
        pre = class_centers(spec.with_split("pretrain", 10))
        ft = class_centers(spec.with_split("finetune-train", 10))
        np.testing.assert_allclose(ft[:, 0], -pre[:, 1], atol=1e-12)
        np.testing.assert_allclose(ft[:, 1], pre[:, 0], atol=1e-12)

    def test_single_class(self):
        with pytest.raises(ConfigError):
            generate_dataset(DatasetSpec(K=1))

    def test_moons(self):
        ds = generate_dataset(DatasetSpec(kind="moons", K=2, n=40))
        assert set(np.unique(ds.labels)) <= {0, 1}

    @given(st.integers(0, 2**32), st.integers(2, 6), st.integers(1, 50))
    def test_labels_in_range(self, seed, K, n):
        ds = generate_dataset(DatasetSpec(seed=seed, K=K, n=n))
        assert ds.features.shape == (n, 16)
        assert ds.labels.min() >= 0 and ds.labels.max() < K


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig().validate()
        assert cfg.train.p == 0.5 and cfg.train.N == 4
        assert cfg.widths == [16, 32, 4]
        assert (cfg.data.n_pretrain, cfg.data.n_train, cfg.data.n_test) == (2048, 64, 1024)
        assert cfg.model.rank == 8

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig.from_dict({"seed": 3, "train": {"p": 0.2}, "sweep": {"p_grid": [0.0, 0.4]}})
        path = tmp_path / "c.json"
        path.write_text(cfg.to_json())
        again = ExperimentConfig.load(path)
        assert again == cfg and again.to_json() == cfg.to_json()
        assert again.train.N == 4  # untouched defaults survive partial sections

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="p_gird"):
            ExperimentConfig.from_dict({"sweep": {"p_gird": [0.1]}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"trian": {}})

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            ExperimentConfig.load(tmp_path / "nope.json")

    @pytest.mark.parametrize(
        "bad",
        [
            {"version": 2},
            {"sweep": {"p_grid": [0.97]}},
            {"sweep": {"seeds": 2}},
            {"data": {"K": 1}},
            {"model": {"adapter": "ia3"}},
            {"eval": {"domain": "median"}},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_child_seed(self):
        assert child_seed(1, 2) == child_seed(1, 2) != child_seed(1, 3)
        assert 0 <= child_seed(2**64 - 1, 0) < 2**63


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["lora", "adalora"])
    def test_round_trip_is_byte_identical(self, tmp_path, kind):
        model = random_lora_mlp([5, 7, 3], 2, seed=1, kind=kind)
        a = save_checkpoint(tmp_path / "a.json", model, {"kind": kind})
        loaded, spec = load_checkpoint(a)
        b = save_checkpoint(tmp_path / "b.json", loaded, spec)
        assert a.read_bytes() == b.read_bytes()
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert np.array_equal(model.forward(x).value, loaded.forward(x).value)

    def test_dense_round_trip(self, tmp_path):
        model = with_adapters(mlp([4, 6, 3], rngmod.derive(0, 1)), "lora", 2, 0, train_head=True)
        path = save_checkpoint(tmp_path / "m.json", model)
        assert dumps(load_checkpoint(path)[0]) == path.read_text()

    def test_shape_mismatch_names_layer(self):
        model = mlp([4, 6, 3], rngmod.derive(0, 1))
        with pytest.raises(CheckpointError, match="layer 1"):
            check_widths(model, [4, 6, 5])

    def test_corrupt_layer_names_index(self, tmp_path):
        model = random_lora_mlp([3, 4, 2], 2, seed=0)
        d = json.loads(dumps(model))
        d["layers"][1]["A"] = [[1.0, 2.0]]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(d))
        with pytest.raises(CheckpointError, match="layer 1"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.json")


class TestModel:
    def test_widths_must_chain(self, rng):
        from lora_dropout_lab.adapters import Dense

        with pytest.raises(DimensionError):
            Model([Dense.init(3, 4, rng), Dense.init(5, 2, rng)])

    def test_fresh_adapters_reproduce_pretrained(self, rng):
        base = mlp([5, 8, 3], rng)
        x = rng.normal(size=(6, 5))
        for kind in ("lora", "adalora"):
            wrapped = with_adapters(base, kind, 4, seed=2)
            np.testing.assert_allclose(wrapped.forward(x).value, base.forward(x).value, atol=1e-12)

    def test_rank_clamped_for_narrow_layers(self, rng):
        wrapped = with_adapters(mlp([5, 8, 3], rng), "lora", 8, seed=0)
        assert [layer.r for layer in wrapped.layers] == [5, 3]

    def test_train_head_keeps_dense_head(self, rng):
        wrapped = with_adapters(mlp([5, 8, 3], rng), "lora", 2, seed=0, train_head=True)
        assert wrapped.layers[-1].kind == "dense" and wrapped.layers[-1].trainable


class TestPipeline:
    def test_end_to_end_reproducible(self):
        cfg = ExperimentConfig.from_dict(
            {
                "data": {"n_pretrain": 128, "n_train": 16, "n_test": 32, "dim": 6, "K": 3},
                "model": {"hidden": [8], "rank": 2},
                "pretrain": {"epochs": 2},
                "train": {"epochs": 2},
            }
        )
        runs = []
        for _ in range(2):
            data = build_datasets(cfg, 5)
            pre, _ = pretrain(cfg, 5, data)
            _, rec = finetune(cfg, pre, 5, data)
            runs.append(rec.to_csv())
        assert runs[0] == runs[1]

    def test_zero_step_finetune_equals_pretrained(self):
        cfg = ExperimentConfig.from_dict(
            {"data": {"n_pretrain": 64, "n_train": 8, "n_test": 8}, "pretrain": {"epochs": 1}, "train": {"epochs": 0}}
        )
        data = build_datasets(cfg, 0)
        pre, _ = pretrain(cfg, 0, data)
        model, rec = finetune(cfg, pre, 0, data)
        x = data["finetune-test"].features
        assert rec.rows == []
        np.testing.assert_allclose(model.forward(x).value, pre.forward(x).value, atol=1e-12)

    def test_checkpoint_mismatch(self):
        cfg = ExperimentConfig()
        with pytest.raises(CheckpointError):
            finetune(cfg, mlp([16, 10, 4], rngmod.derive(0, 1)), 0)


class TestParallel:
    def test_order_preserved(self):
        assert parallel_map(lambda v: v * v, range(20), threads=4) == [v * v for v in range(20)]

    def test_env_var(self, monkeypatch):
        monkeypatch.setenv("LORA_LAB_THREADS", "3")
        assert thread_count() == 3
        monkeypatch.setenv("LORA_LAB_THREADS", "0")
        assert thread_count() >= 1
        monkeypatch.setenv("LORA_LAB_THREADS", "many")
        with pytest.raises(ConfigError):
            thread_count()


class TestReporting:
    def test_json_is_sorted_and_strict(self):
        text = dumps_json({"b": float("inf"), "a": np.float64(1.5), "c": np.array([1, 2])})
        assert json.loads(text) == {"a": 1.5, "b": "inf", "c": [1, 2]}
        assert text.index('"a"') < text.index('"b"')

    def test_csv_floats_round_trip(self):
        text = csv_text(("x", "y"), [(0.1 + 0.2, 3)])
        assert text == "x,y\n0.30000000000000004,3\n"

    def test_svg_has_series_and_legend(self):
        svg = line_chart({"seed 0": ([0, 1], [2, 1]), "mean": ([0, 1], [1.5, 1.0])}, "t", "p", "gap")
        assert svg.startswith("<svg") and svg.count("<polyline") == 2 and "mean" in svg
