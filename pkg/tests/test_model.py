"""Residual CNN construction, forward contracts, and checkpoint round trips."""

import numpy as np
import pytest

from marginpipe.errors import (
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    ShapeError,
)
from marginpipe.model import (
    ModelConfig,
    build_model,
    forward_classify,
    forward_embed,
    forward_graph,
    load_checkpoint,
    save_checkpoint,
)
from marginpipe.numerics import finite_difference_gradcheck, sigmoid

TINY = ModelConfig(num_blocks=2, base_channels=2, embedding_dim=4, input_size=8, seed=3)


def _patch(seed=0, size=8):
    return np.random.default_rng(seed).random((1, size, size)).astype(np.float32)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(num_blocks=0)
    with pytest.raises(ConfigError):
        ModelConfig(embedding_dim=1)
    with pytest.raises(ConfigError):
        ModelConfig(num_blocks=4, input_size=60)  # 60 not divisible by 16


def test_same_seed_builds_identical_models():
    a = build_model(TINY)
    b = build_model(TINY)
    assert a.parameter_count() == b.parameter_count()
    assert set(a.params) == set(b.params)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_different_seeds_differ():
    a = build_model(TINY)
    b = build_model(ModelConfig(num_blocks=2, base_channels=2, embedding_dim=4, input_size=8, seed=4))
    assert any(a.params[n].tobytes() != b.params[n].tobytes() for n in a.params)


def test_single_block_shapes():
    cfg = ModelConfig(num_blocks=1, base_channels=4, embedding_dim=8, input_size=64, seed=0)
    m = build_model(cfg)
    emb = forward_embed(m, _patch(size=64))
    assert len(emb.per_block) == 1
    assert emb.per_block[0].shape == (4,)  # pooled from the 32x32 map
    assert emb.final.shape == (8,)


def test_embeddings_deterministic_and_input_sensitive():
    m = build_model(TINY)
    p = _patch(1)
    e1 = forward_embed(m, p)
    e2 = forward_embed(m, p)
    assert all(np.array_equal(a, b) for a, b in zip(e1.per_block, e2.per_block))
    assert np.array_equal(e1.final, e2.final)
    zeros = np.zeros((1, 8, 8), dtype=np.float32)
    ones = np.ones((1, 8, 8), dtype=np.float32)
    assert not np.array_equal(forward_embed(m, zeros).final, forward_embed(m, ones).final)


def test_zero_head_gives_half():
    m = build_model(TINY)
    m.params["head.w"][:] = 0.0
    m.params["head.b"][:] = 0.0
    assert forward_classify(m, _patch(2)) == pytest.approx(0.5, abs=1e-7)


def test_bias_ten_gives_saturated_probability():
    m = build_model(TINY)
    m.params["head.w"][:] = 0.0
    m.params["head.b"][:] = 10.0
    assert forward_classify(m, _patch(2)) == pytest.approx(0.9999546, abs=1e-5)


def test_probability_range_over_many_patches():
    m = build_model(TINY)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        p = forward_classify(m, rng.random((1, 8, 8)).astype(np.float32))
        assert 0.0 < p < 1.0


def test_classify_decomposes_through_embed():
    m = build_model(TINY)
    for seed in range(5):
        patch = _patch(seed)
        final = forward_embed(m, patch).final
        z = m.params["head.w"].astype(np.float64) @ final.astype(np.float64) + m.params["head.b"]
        assert forward_classify(m, patch) == pytest.approx(float(sigmoid(z)[0]), abs=1e-6)


def test_patch_contract_errors():
    m = build_model(TINY)
    with pytest.raises(ShapeError):
        forward_classify(m, np.zeros((1, 9, 9), dtype=np.float32))
    with pytest.raises(ContractError):
        forward_classify(m, np.full((1, 8, 8), 1.5, dtype=np.float32))


def test_full_model_gradient_check(rng):
    m = build_model(TINY)
    x = rng.random((2, 1, 8, 8))
    g, nodes = forward_graph(m, x, want="classify", dtype=np.float64)
    loss = g.sum(g.mul(nodes["prob"], nodes["prob"]))
    g.validate()
    assert finite_difference_gradcheck(g, loss, h=1e-5, max_coords_per_param=4, seed=1) <= 1e-4


def test_local_mode_truncates_gradients(rng):
    m = build_model(TINY)
    x = rng.random((2, 1, 8, 8))
    g, nodes = forward_graph(m, x, want="blocks", detach_between_blocks=True, dtype=np.float64)
    loss = g.sum(g.mul(nodes["block_embeds"][-1], nodes["block_embeds"][-1]))
    grads = g.backward(loss)
    for name, grad in grads.items():
        if name.startswith("blocks.0"):
            assert not grad.any(), name
    assert any(grads[n].any() for n in grads if n.startswith("blocks.1"))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = build_model(TINY)
    m.stage = "finetuned"
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.config == TINY
    assert loaded.stage == "finetuned"
    assert list(loaded.params) == list(m.params)
    for name in m.params:
        assert loaded.params[name].tobytes() == m.params[name].tobytes()
        assert loaded.params[name].dtype == np.float32


def test_checkpoint_forward_reproduces(tmp_path):
    m = build_model(TINY)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    patch = _patch(5)
    assert forward_classify(loaded, patch) == forward_classify(m, patch)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    m = build_model(TINY)
    save_checkpoint(m, path)
    data = path.read_bytes()
    path.write_bytes(b"JUNK" + data[4:])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "bad.ckpt"
    m = build_model(TINY)
    save_checkpoint(m, path)
    data = path.read_bytes()
    path.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_truncation_sweep(tmp_path):
    m = build_model(TINY)
    path = tmp_path / "good.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    for cut in (6, 11, 40, len(data) // 2, len(data) - 3):
        bad = tmp_path / f"cut_{cut}.ckpt"
        bad.write_bytes(data[:cut])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(bad)


def test_model_stage_must_be_known():
    from marginpipe.model import Model

    with pytest.raises(ContractError):
        Model(TINY, build_model(TINY).params, stage="half-trained")
