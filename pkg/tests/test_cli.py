"""Config loading, pipeline wiring and the command-line interface."""

import numpy as np
import pytest
import yaml

from csdetect.cli import entry
from csdetect.config import ConfigError, default_config, load_config, save_config
from csdetect.core import AnnotationSet, ImageGrid
from csdetect.pipeline import (
    build_training_examples,
    derive_seed,
    generate_dataset,
    load_split,
    make_codec,
    run_detection,
)

SMALL = {
    "grid": {"width": 32, "height": 32},
    "encoder": {"scheme": 2, "axes": 6, "measurements": 12},
    "recovery": {"solver": "omp", "max_sparsity": 4},
    "decode": {"bandwidth": 3.0, "min_support": 3, "merge_radius": 4.0, "merge_min_count": 2},
    "predictor": {"mode": "oracle", "sigma_rel": 0.02, "mtl_lambda": 0.2,
                  "hidden": 8, "epochs": 3, "learning_rate": 0.01,
                  "batch_size": 4, "input_edge": 8},
    "synth": {"train_images": 2, "test_images": 2, "image_width": 32,
              "image_height": 32, "cell_count": [1, 2], "blob_radius": [2.5, 3.5],
              "intensity": [0.8, 1.0], "background_noise_sigma": 0.01,
              "min_separation": 9.0},
    "patches": {"size": 32, "offsets": [0]},
    "evaluation": {"rho": 6.0},
    "run": {"seed": 5, "matrix_seed": 11, "workers": 1},
}


def _write_config(path, doc=SMALL):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = _write_config(root / "config.yaml")
    data = root / "data"
    assert entry(["synth", "--config", cfg, "--out", str(data)]) == 0
    return {"root": root, "config": cfg, "data": data,
            "manifest": str(data / "manifest.yaml")}


# ------------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    path = tmp_path / "cfg.yaml"
    config = load_config(_write_config(path))
    save_config(config, path)
    assert load_config(path) == config
    assert config.synth.cell_count == (1, 2)
    assert config.patches.offsets == (0,)


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path) == default_config()


def test_config_rejects_unknown_names(tmp_path):
    path = tmp_path / "bad.yaml"
    _write_config(path, {"sensing": {"rows": 5}})
    with pytest.raises(ConfigError, match="unknown config sections"):
        load_config(path)
    _write_config(path, {"encoder": {"rows": 5}})
    with pytest.raises(ConfigError, match="unknown keys in 'encoder'"):
        load_config(path)


def test_config_rejects_bad_values(tmp_path):
    path = tmp_path / "bad.yaml"
    _write_config(path, {"encoder": {"scheme": 3}})
    with pytest.raises(ConfigError, match="scheme"):
        load_config(path)
    _write_config(path, {"patches": {"size": 32, "offsets": [40]}})
    with pytest.raises(ConfigError, match="offset 40"):
        load_config(path)
    _write_config(path, {"patches": {"size": 32}, "encoder": {"measurements": 46},
                         "synth": {"image_width": 32, "image_height": 32}})
    with pytest.raises(ConfigError, match="signal length"):
        load_config(path)
    _write_config(path, {"decode": {"min_support": 28}})
    with pytest.raises(ConfigError, match="min_support"):
        load_config(path)


def test_config_rejects_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("a: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


# ----------------------------------------------------------------- pipeline


def test_derive_seed_separates_work_items():
    seeds = {
        derive_seed(7, i, j, k, salt)
        for i in range(3) for j in range(3) for k in range(3)
        for salt in (0, 500_009)
    }
    assert len(seeds) == 3 * 3 * 3 * 2
    assert derive_seed(7, 1, 2, 3, 4) == derive_seed(7, 1, 2, 3, 4)


def test_make_codec_schemes(tmp_path):
    config = load_config(_write_config(tmp_path / "c.yaml"))
    codec = make_codec(config)
    assert codec.scheme == 2
    assert codec.layout.count == 6
    assert codec.phi.rows == 12
    assert codec.phi.cols == codec.layout.bin_count
    doc = dict(SMALL, encoder={"scheme": 1, "axes": 1, "measurements": 12},
               decode={"scheme1_threshold": 0.5})
    flat = make_codec(load_config(_write_config(tmp_path / "c1.yaml", doc)))
    assert flat.layout is None
    assert flat.phi.cols == 32 * 32


def test_generate_dataset_is_reproducible(tmp_path):
    config = load_config(_write_config(tmp_path / "c.yaml"))
    manifest = generate_dataset(config, tmp_path / "a")
    assert len(manifest["images"]) == 4
    assert manifest["splits"]["train"] == ["train_000", "train_001"]
    assert manifest["splits"]["test"] == ["test_000", "test_001"]
    generate_dataset(config, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_load_split(tmp_path):
    config = load_config(_write_config(tmp_path / "c.yaml"))
    generate_dataset(config, tmp_path / "d")
    train = load_split(tmp_path / "d" / "manifest.yaml", "train")
    assert [image_id for image_id, _, _ in train] == ["train_000", "train_001"]
    image_id, image, annotations = train[0]
    assert image.shape == (32, 32)
    assert annotations.grid == ImageGrid(32, 32)
    assert 1 <= len(annotations.cells) <= 2
    assert load_split(tmp_path / "d" / "manifest.yaml", "holdout") == []


def test_build_training_examples_rotates_each_patch(tmp_path):
    config = load_config(_write_config(tmp_path / "c.yaml"))
    codec = make_codec(config)
    rng = np.random.default_rng(0)
    grid = ImageGrid(32, 32)
    images = [
        ("img", rng.uniform(size=(32, 32)), AnnotationSet(grid=grid, cells=((5.0, 8.0),)))
    ]
    examples = build_training_examples(config, images, codec)
    assert len(examples) == 4
    assert all(ex.label.size == 12 * 6 + 1 for ex in examples)
    assert all(ex.patch.shape == (32, 32) for ex in examples)


def test_run_detection_counts_failures(tmp_path):
    doc = dict(SMALL, predictor=dict(SMALL["predictor"], mode="trained"))
    config = load_config(_write_config(tmp_path / "c.yaml", doc))
    codec = make_codec(config)
    grid = ImageGrid(32, 32)
    images = [("img", np.zeros((32, 32)), AnnotationSet(grid=grid, cells=((5.0, 5.0),)))]
    results, failures = run_detection(config, codec, images, model=None)
    assert failures == 1
    assert results == []


# ---------------------------------------------------------------------- CLI


def test_cli_synth_writes_dataset(workspace):
    data = workspace["data"]
    assert (data / "manifest.yaml").is_file()
    assert sorted(p.name for p in (data / "images").iterdir()) == [
        "test_000.pgm", "test_001.pgm", "train_000.pgm", "train_001.pgm",
    ]
    assert len(list((data / "annotations").iterdir())) == 4


def test_cli_run_oracle(workspace, tmp_path, capsys):
    out = tmp_path / "out"
    code = entry(["run", "--config", workspace["config"],
                  "--manifest", workspace["manifest"], "--out", str(out)])
    assert code == 0
    assert "precision" in capsys.readouterr().out
    lines = (out / "evaluation.csv").read_text().splitlines()
    assert lines[0] == "image,tp,fp,fn,precision,recall,f1"
    assert lines[-1].startswith("aggregate,")
    assert sorted(p.name for p in (out / "detections").iterdir()) == [
        "test_000.csv", "test_001.csv",
    ]


def test_cli_run_is_deterministic(workspace, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert entry(["run", "--config", workspace["config"],
                      "--manifest", workspace["manifest"], "--out", str(out)]) == 0
        outs.append(out)
    for rel in ("evaluation.csv", "detections/test_000.csv", "detections/test_001.csv"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_cli_run_diagnostics(workspace, tmp_path):
    out = tmp_path / "diag"
    code = entry(["run", "--config", workspace["config"], "--diagnostics",
                  "--manifest", workspace["manifest"], "--out", str(out)])
    assert code == 0
    files = sorted((out / "diagnostics").iterdir())
    assert [p.name for p in files] == ["test_000_candidates.csv", "test_001_candidates.csv"]
    header = files[0].read_text().splitlines()[0]
    assert header == "offset,patch_x,patch_y,axis,x,y,magnitude,iterations,converged"


def test_cli_ensemble(workspace, tmp_path, capsys):
    out = tmp_path / "ens"
    code = entry(["ensemble", "--config", workspace["config"], "--offsets", "0,16",
                  "--manifest", workspace["manifest"], "--out", str(out)])
    assert code == 0
    assert "merged 2 offsets" in capsys.readouterr().out
    assert (out / "evaluation.csv").is_file()


def test_cli_train_then_run_trained(workspace, tmp_path, capsys):
    model_dir = tmp_path / "model"
    code = entry(["train", "--config", workspace["config"],
                  "--manifest", workspace["manifest"], "--out", str(model_dir)])
    assert code == 0
    assert "trained 3 epochs" in capsys.readouterr().out
    assert (model_dir / "model.bin").is_file()
    log_lines = (model_dir / "training_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,loss" and len(log_lines) == 4
    out = tmp_path / "out"
    code = entry(["run", "--config", workspace["config"], "--mode", "trained",
                  "--model", str(model_dir / "model.bin"),
                  "--manifest", workspace["manifest"], "--out", str(out)])
    assert code == 0
    assert (out / "evaluation.csv").is_file()


def test_cli_ripcheck(workspace, tmp_path, capsys):
    out = tmp_path / "rip"
    code = entry(["ripcheck", "--config", workspace["config"], "--out", str(out),
                  "--trials", "40", "--sparsity", "2", "--delta-bound", "0.99"])
    assert code == 0
    assert "delta_observed" in capsys.readouterr().out
    lines = (out / "rip_report.csv").read_text().splitlines()
    assert lines[0].startswith("rows,cols,sparsity_tested")
    row = lines[1].split(",")
    assert row[0] == "12" and row[3] == "40"


def test_cli_exit_codes(workspace, tmp_path, capsys):
    bad_cfg = _write_config(tmp_path / "bad.yaml", {"encoder": {"rows": 9}})
    assert entry(["run", "--config", bad_cfg, "--manifest", workspace["manifest"],
                  "--out", str(tmp_path / "o1")]) == 2
    assert "config error" in capsys.readouterr().err

    assert entry(["run", "--config", workspace["config"], "--mode", "trained",
                  "--manifest", workspace["manifest"], "--out", str(tmp_path / "o2")]) == 2
    assert "needs --model" in capsys.readouterr().err

    assert entry(["run", "--config", workspace["config"],
                  "--manifest", str(tmp_path / "nope.yaml"),
                  "--out", str(tmp_path / "o3")]) == 2
    assert "missing file" in capsys.readouterr().err

    assert entry(["run", "--config", workspace["config"], "--offsets", "0,99",
                  "--manifest", workspace["manifest"], "--out", str(tmp_path / "o4")]) == 2
    assert "offset 99" in capsys.readouterr().err

    infeasible = _write_config(
        tmp_path / "inf.yaml",
        dict(SMALL, synth=dict(SMALL["synth"], cell_count=[3, 3], min_separation=1000.0)),
    )
    assert entry(["synth", "--config", infeasible, "--out", str(tmp_path / "o5")]) == 2
    assert "could not place" in capsys.readouterr().err
