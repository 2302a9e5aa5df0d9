"""CLI surface, run configs, and checkpoint persistence."""

from __future__ import annotations

import json

import numpy as np
import pytest

from evolmpnn.cli import (
    CheckpointError,
    ConfigError,
    dispatch,
    load_checkpoint,
    load_run_config,
    save_checkpoint,
)
from evolmpnn.data import LandscapeSpec, load_family, load_split, synth_family
from evolmpnn.model import ModelConfig, init_params


def landscape_json(tmp_path, n=8, m=40, max_mutations=4, seed=3, scale=1.0):
    rng = np.random.default_rng(seed)
    doc = {
        "n": n,
        "m": m,
        "max_mutations": max_mutations,
        "additive": (scale * rng.normal(size=(n, 20))).tolist(),
        "epistasis": [],
        "noise_std": 0.0,
        "seed": seed,
    }
    path = tmp_path / "landscape.json"
    path.write_text(json.dumps(doc))
    return path


def run_config_json(tmp_path, family, split, **model_kw):
    model = dict(variant="evolmpnn", d=8, heads=2, l_r=1, l_p=1, dtype="float64")
    model.update(model_kw)
    doc = {
        "model": model,
        "train": {"lr": 3e-3, "epochs": 4, "batch_size": 64, "patience": 10, "seed": 0},
        "data": {"family": str(family), "split": str(split)},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def make_dataset(tmp_path):
    spec_path = landscape_json(tmp_path)
    family_path = tmp_path / "family.csv"
    assert dispatch(["synth", "--config", str(spec_path), "--out", str(family_path)]) == 0
    split_path = tmp_path / "split.csv"
    code = dispatch(
        [
            "split",
            "--family",
            str(family_path),
            "--mode",
            "lambda",
            "--lambda",
            "2",
            "--valid-frac",
            "0.2",
            "--out",
            str(split_path),
        ]
    )
    assert code == 0
    return family_path, split_path


class TestPackageSurface:
    def test_lazy_submodule_access(self):
        import evolmpnn

        assert callable(evolmpnn.evaluation.spearman)
        assert evolmpnn.__version__
        with pytest.raises(AttributeError):
            evolmpnn.nonexistent_module


class TestSynthAndSplit:
    def test_synth_writes_loadable_family(self, tmp_path, capsys):
        spec = landscape_json(tmp_path)
        out = tmp_path / "fam.csv"
        assert dispatch(["synth", "--config", str(spec), "--out", str(out)]) == 0
        fam = load_family(out)
        assert fam.m == 40 and fam.n == 8
        info = json.loads(capsys.readouterr().out)
        assert info["m"] == 40

    def test_synth_is_deterministic(self, tmp_path):
        spec = landscape_json(tmp_path)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        dispatch(["synth", "--config", str(spec), "--out", str(a)])
        dispatch(["synth", "--config", str(spec), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_split_partitions_family(self, tmp_path):
        family_path, split_path = make_dataset(tmp_path)
        fam = load_family(family_path)
        split = load_split(split_path, fam)
        counts = fam.mutation_counts()
        for i, rid in enumerate(fam.ids):
            in_pool = counts[i] <= 2
            assert (split.tags[rid] in ("train", "valid")) == in_pool

    def test_low_high_mode(self, tmp_path):
        family_path, _ = make_dataset(tmp_path)
        out = tmp_path / "lh.csv"
        code = dispatch(
            ["split", "--family", str(family_path), "--mode", "low-high", "--out", str(out)]
        )
        assert code == 0
        fam = load_family(family_path)
        split = load_split(out, fam)
        assert split.counts()["train"] > 0

    def test_lambda_mode_requires_lambda(self, tmp_path, capsys):
        family_path, _ = make_dataset(tmp_path)
        code = dispatch(
            [
                "split",
                "--family",
                str(family_path),
                "--mode",
                "lambda",
                "--out",
                str(tmp_path / "x.csv"),
            ]
        )
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert "lambda" in err["error"]

    def test_unknown_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            dispatch(["split", "--bogus", "x"])
        assert exc.value.code == 2

    def test_missing_file_exits_1(self, tmp_path, capsys):
        code = dispatch(
            [
                "split",
                "--family",
                str(tmp_path / "absent.csv"),
                "--mode",
                "low-high",
                "--out",
                str(tmp_path / "s.csv"),
            ]
        )
        assert code == 1
        assert "error" in json.loads(capsys.readouterr().err)


class TestRunConfig:
    def test_paths_resolve_relative_to_config(self, tmp_path):
        (tmp_path / "family.csv").write_text("id,sequence,target,is_wild_type\n")
        doc = {"model": {}, "train": {}, "data": {"family": "family.csv"}}
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(doc))
        run = load_run_config(cfg)
        assert run["data"]["family"] == str((tmp_path / "family.csv").resolve())

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": {}, "extra": {}}))
        with pytest.raises(ConfigError, match="unknown run config sections"):
            load_run_config(cfg)

    def test_unknown_model_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": {"depth": 3}}))
        with pytest.raises(ValueError, match="unknown model config keys"):
            load_run_config(cfg)

    def test_unknown_data_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"data": {"families": "x.csv"}}))
        with pytest.raises(ConfigError, match="unknown data keys"):
            load_run_config(cfg)


class TestCheckpoints:
    def make_params(self, dtype="float32"):
        config = ModelConfig(variant="evolmpnn", d=4, heads=2, l_r=1, l_p=1, dtype=dtype)
        params = init_params(config, n_positions=5, seed=0)
        run = {"model": config.to_json(), "train": {}, "data": {}}
        return params, run

    def test_round_trip_is_bitwise_for_float32(self, tmp_path):
        params, run = self.make_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, run, path)
        loaded, run_back = load_checkpoint(path)
        assert run_back["model"] == run["model"]
        assert set(loaded.tensors) == set(params.tensors)
        for name, value in params.tensors.items():
            assert loaded.tensors[name].dtype == np.float32
            np.testing.assert_array_equal(loaded.tensors[name], value)
        for name, value in params.buffers.items():
            np.testing.assert_array_equal(
                loaded.buffers[name], value.astype(np.float32)
            )

    def test_save_is_deterministic(self, tmp_path):
        params, run = self.make_params()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(params, run, a)
        save_checkpoint(params, run, b)
        assert a.read_bytes() == b.read_bytes()

    def test_truncated_blob_fails_checksum(self, tmp_path):
        params, run = self.make_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, run, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CheckpointError, match="blob is|checksum"):
            load_checkpoint(path)

    def test_shape_edit_names_tensor(self, tmp_path):
        params, run = self.make_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, run, path)
        raw = path.read_bytes()
        import struct as _struct

        (mlen,) = _struct.unpack_from("<I", raw, 4)
        manifest = json.loads(raw[8 : 8 + mlen])
        manifest["tensors"][0]["shape"] = [1, 1]
        edited = json.dumps(manifest, sort_keys=True).encode()
        path.write_bytes(raw[:4] + _struct.pack("<I", len(edited)) + edited + raw[8 + mlen :])
        name = manifest["tensors"][0]["name"]
        with pytest.raises(CheckpointError, match=name):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        params, run = self.make_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, run, path)
        raw = path.read_bytes()
        import struct as _struct

        (mlen,) = _struct.unpack_from("<I", raw, 4)
        manifest = json.loads(raw[8 : 8 + mlen])
        manifest["format_version"] = 99
        edited = json.dumps(manifest, sort_keys=True).encode()
        path.write_bytes(raw[:4] + _struct.pack("<I", len(edited)) + edited + raw[8 + mlen :])
        with pytest.raises(CheckpointError, match="unsupported format version"):
            load_checkpoint(path)


class TestTrainEvalPipeline:
    def test_end_to_end_train_eval(self, tmp_path, capsys):
        family_path, split_path = make_dataset(tmp_path)
        cfg = run_config_json(tmp_path, family_path, split_path)
        ckpt = tmp_path / "model.ckpt"
        assert dispatch(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        assert (tmp_path / (ckpt.name + ".log.jsonl")).exists()
        capsys.readouterr()
        metrics_out = tmp_path / "metrics.json"
        code = dispatch(
            ["eval", "--ckpt", str(ckpt), "--out", str(metrics_out), "--group-edges", "1,3"]
        )
        assert code == 0
        stdout_doc = json.loads(capsys.readouterr().out)
        assert {"spearman", "mse", "by_mutation_count", "runtime_s"} <= set(stdout_doc)
        file_doc = json.loads(metrics_out.read_text())
        assert "runtime_s" not in file_doc
        assert file_doc["spearman"] == stdout_doc["spearman"]
        assert set(file_doc["by_mutation_count"]) == {"1-2", "3+"}

    def test_eval_file_artifacts_are_reproducible(self, tmp_path, capsys):
        family_path, split_path = make_dataset(tmp_path)
        cfg = run_config_json(tmp_path, family_path, split_path)
        ckpt_a, ckpt_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        dispatch(["train", "--config", str(cfg), "--out", str(ckpt_a)])
        dispatch(["train", "--config", str(cfg), "--out", str(ckpt_b)])
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
        out_a, out_b = tmp_path / "ma.json", tmp_path / "mb.json"
        dispatch(["eval", "--ckpt", str(ckpt_a), "--out", str(out_a)])
        dispatch(["eval", "--ckpt", str(ckpt_b), "--out", str(out_b)])
        capsys.readouterr()
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_variant_override_flows_to_checkpoint(self, tmp_path, capsys):
        family_path, split_path = make_dataset(tmp_path)
        cfg = run_config_json(tmp_path, family_path, split_path)
        ckpt = tmp_path / "g.ckpt"
        code = dispatch(
            [
                "train",
                "--config",
                str(cfg),
                "--out",
                str(ckpt),
                "--variant",
                "evolgnn",
                "--knn-k",
                "3",
            ]
        )
        assert code == 0
        _, run_back = load_checkpoint(ckpt)
        assert run_back["model"]["variant"] == "evolgnn"
        assert run_back["model"]["knn_k"] == 3
        capsys.readouterr()
        assert dispatch(["eval", "--ckpt", str(ckpt)]) == 0

    def test_distortion_reference(self, tmp_path, capsys):
        family_path, _ = make_dataset(tmp_path)
        capsys.readouterr()
        code = dispatch(["distortion", "--family", str(family_path)])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["metric"] == "hamming"
        assert doc["pairs"] > 0

    def test_distortion_from_checkpoint(self, tmp_path, capsys):
        family_path, split_path = make_dataset(tmp_path)
        cfg = run_config_json(tmp_path, family_path, split_path)
        ckpt = tmp_path / "model.ckpt"
        dispatch(["train", "--config", str(cfg), "--out", str(ckpt)])
        capsys.readouterr()
        assert dispatch(["distortion", "--ckpt", str(ckpt)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["pairs"] > 0
