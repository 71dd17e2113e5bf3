"""Run-configuration loading, merging, and echoing."""

import dataclasses
import json

import pytest

from marginpipe.config import (
    RunConfig,
    effective_config,
    load_run_config,
    with_seed,
    write_effective_config,
)
from marginpipe.errors import ConfigError

FULL_DOC = {
    "phantom": {"image_size": 128, "band_width": 10, "tumor_radius_range": [0.1, 0.18],
                "margin_present_prob": 1.0, "seed": 5},
    "patches": {"patch_size": 32, "stride_positive": 4,
                "stride_negative": {"train": 16, "val": 12, "test": 20},
                "label_fraction": 0.2},
    "model": {"num_blocks": 2, "base_channels": 4, "embedding_dim": 8,
              "input_size": 32, "seed": 5},
    "train": {"epochs": 9, "batch_size": 4, "lr0": 5e-4,
              "local": {"epochs": 3}, "finetune": {"epochs": 2, "seed": 77}},
    "focal": {"alpha": 0.6, "gamma": 1.5},
    "refine": {"radius": 3, "min_area": 9},
    "data": {"train_patches": "/tmp/x/train.bin", "counts": {"train": 3, "val": 1, "test": 1}},
}


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_load_full_document(tmp_path):
    rc = load_run_config(write_config(tmp_path, FULL_DOC))
    assert rc.phantom.image_size == 128
    assert rc.phantom.tumor_radius_range == (0.1, 0.18)  # list became tuple
    assert rc.patches.stride_negative == {"train": 16, "val": 12, "test": 20}
    assert rc.model.embedding_dim == 8
    assert rc.focal.alpha == 0.6
    assert rc.refine.radius == 3
    assert rc.data.train_patches == "/tmp/x/train.bin"
    assert rc.data.val_patches is None


def test_omitted_sections_fall_back_to_defaults(tmp_path):
    rc = load_run_config(write_config(tmp_path, {"model": {"seed": 9}}))
    assert rc == dataclasses.replace(
        RunConfig(), model=dataclasses.replace(RunConfig().model, seed=9)
    )


def test_train_merging_precedence(tmp_path):
    rc = load_run_config(write_config(tmp_path, FULL_DOC))
    local = rc.train_config("local")
    assert (local.epochs, local.batch_size, local.lr0) == (3, 4, 5e-4)
    glob = rc.train_config("global")  # no stage block: base values only
    assert (glob.epochs, glob.seed) == (9, 0)
    fine = rc.train_config("finetune")
    assert (fine.epochs, fine.seed) == (2, 77)
    assert rc.train_config("finetune", seed=123).seed == 123  # CLI beats file
    with pytest.raises(ConfigError):
        rc.train_config("warmup")


def test_unknown_top_level_section_rejected(tmp_path):
    path = write_config(tmp_path, {"phanton": {}})
    with pytest.raises(ConfigError, match="phanton"):
        load_run_config(path)


@pytest.mark.parametrize(
    "section,payload",
    [
        ("phantom", {"image_sz": 64}),
        ("patches", {"stride": 4}),
        ("model", {"blocks": 2}),
        ("focal", {"alpha_t": 0.5}),
        ("refine", {"radius_px": 3}),
        ("data", {"train_cache": "x"}),
    ],
)
def test_unknown_key_names_its_section(tmp_path, section, payload):
    path = write_config(tmp_path, {section: payload})
    with pytest.raises(ConfigError, match=section):
        load_run_config(path)


def test_unknown_train_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train"):
        load_run_config(write_config(tmp_path, {"train": {"learning_rate": 1e-3}}))
    with pytest.raises(ConfigError, match="finetune"):
        load_run_config(write_config(tmp_path, {"train": {"finetune": {"momentum": 0.9}}}))
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path, {"train": {"local": 3}}))


def test_bad_stage_values_surface_at_load(tmp_path):
    # batch_size validation lives in TrainConfig; loading must trip it eagerly
    path = write_config(tmp_path, {"train": {"global": {"batch_size": 7}}})
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_invalid_json_and_wrong_top_level(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_run_config(bad)
    with pytest.raises(ConfigError, match="object"):
        load_run_config(write_config(tmp_path, []))


def test_data_counts_validation(tmp_path):
    with pytest.raises(ConfigError, match="counts"):
        load_run_config(write_config(tmp_path, {"data": {"counts": {"training": 3}}}))
    with pytest.raises(ConfigError, match="counts"):
        load_run_config(write_config(tmp_path, {"data": {"counts": {"train": -1}}}))


def test_with_seed_reaches_every_stage(tmp_path):
    rc = load_run_config(write_config(tmp_path, FULL_DOC))
    seeded = with_seed(rc, 99)
    assert seeded.phantom.seed == 99
    assert seeded.model.seed == 99
    for stage in ("local", "global", "finetune"):
        assert seeded.train_config(stage).seed == 99  # nested seeds stripped
    assert with_seed(rc, None) is rc
    # non-seed overrides survive
    assert seeded.train_config("finetune").epochs == 2


def test_effective_config_round_trips(tmp_path):
    for rc in (RunConfig(), load_run_config(write_config(tmp_path, FULL_DOC))):
        dumped = tmp_path / "echo.json"
        dumped.write_text(json.dumps(effective_config(rc)))
        assert load_run_config(dumped) == rc


def test_write_effective_config_records_command(tmp_path):
    path = write_effective_config(RunConfig(), tmp_path / "out", {"name": "demo", "n": 3})
    doc = json.loads(path.read_text())
    assert path.name == "effective-config.json"
    assert doc["command"] == {"name": "demo", "n": 3}
    assert doc["model"]["num_blocks"] == RunConfig().model.num_blocks
