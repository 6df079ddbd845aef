import struct

import numpy as np
import pytest

from pyramid_iqa.errors import (CheckpointMismatchError, CheckpointTruncatedError,
                                CheckpointVersionError, ImageError, ShapeError,
                                StaleCacheError)
from pyramid_iqa.model import (ModelConfig, backward, build_model, forward, load_checkpoint,
                               predict_image, save_checkpoint)

import gradchecks


@pytest.fixture(scope="module")
def full_model():
    return build_model(ModelConfig(fc_sizes=(32, 16, 1)))


def test_full_variant_head_width():
    cfg = ModelConfig()
    assert cfg.head_input_width == 5536
    model = build_model(cfg)
    assert model.head[0].weights.shape == (2048, 5536)
    assert model.head[1].weights.shape == (1024, 2048)
    assert model.head[2].weights.shape == (1, 1024)


@pytest.mark.parametrize("variant, width", [
    ("full", 5536), ("direct_concat", 5440), ("distorted_only", 2720), ("residual_only", 2720)])
def test_variant_widths(variant, width):
    assert ModelConfig(variant=variant).head_input_width == width


def test_fc_override_checked():
    with pytest.raises(ValueError, match="inconsistent"):
        ModelConfig(fc_in=1234)
    assert ModelConfig(variant="direct_concat", fc_in=5440).fc_in == 5440


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(conv_channels=(8, 8, 16, 16))
    with pytest.raises(ValueError):
        ModelConfig(fc_sizes=(16, 2))
    with pytest.raises(ValueError):
        ModelConfig(variant="triple")
    with pytest.raises(ValueError, match="spp bin"):
        ModelConfig(patch_size=32)


def test_streams_not_shared():
    model = build_model(ModelConfig.slim())
    wd = model.streams["distorted"].convs[0].weights
    wr = model.streams["residual"].convs[0].weights
    assert wd is not wr and not np.array_equal(wd, wr)


def test_build_deterministic():
    a = build_model(ModelConfig.slim(seed=5)).state()
    b = build_model(ModelConfig.slim(seed=5)).state()
    c = build_model(ModelConfig.slim(seed=6)).state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_forward_shapes(full_model):
    rng = np.random.default_rng(0)
    d = rng.random((2, 1, 128, 128), dtype=np.float32)
    r = rng.random((2, 1, 128, 128), dtype=np.float32)
    scores, cache = forward(full_model, d, r, "eval")
    assert scores.shape == (2,)
    assert cache.spp_shapes["distorted"] == (2, 32, 8, 8)
    assert cache.streams["distorted"][4]["z"].shape == (2, 32, 8, 8)
    assert np.all(np.isfinite(scores))


def test_forward_eval_deterministic(full_model):
    rng = np.random.default_rng(1)
    d = rng.random((3, 1, 128, 128), dtype=np.float32)
    r = rng.random((3, 1, 128, 128), dtype=np.float32)
    a, _ = forward(full_model, d, r, "eval")
    b, _ = forward(full_model, d, r, "eval")
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_patch_size(full_model):
    with pytest.raises(ShapeError, match="128"):
        forward(full_model, np.zeros((1, 1, 64, 64)), np.zeros((1, 1, 64, 64)))


def test_single_stream_ignores_other_input():
    model = build_model(ModelConfig.slim(variant="distorted_only"))
    d = np.random.default_rng(0).random((2, 1, 64, 64))
    a, _ = forward(model, d, None, "eval")
    b, _ = forward(model, d, np.ones((2, 1, 64, 64)), "eval")
    np.testing.assert_array_equal(a, b)
    model = build_model(ModelConfig.slim(variant="residual_only"))
    a, _ = forward(model, None, d, "eval")
    assert a.shape == (2,)


def test_backward_zero_and_congruent():
    model = build_model(ModelConfig.slim())
    rng = np.random.default_rng(0)
    d = rng.random((2, 1, 64, 64))
    r = rng.random((2, 1, 64, 64))
    _, cache = forward(model, d, r, "train")
    grads = backward(model, cache, np.zeros(2))
    params = model.parameters()
    assert list(grads) == list(params)
    for k in params:
        assert grads[k].shape == params[k].shape
        assert not grads[k].any(), k


def test_backward_rejects_stale_cache():
    model = build_model(ModelConfig.slim())
    d = np.random.default_rng(0).random((2, 1, 64, 64))
    _, cache = forward(model, d, d, "train")
    model.touch()
    with pytest.raises(StaleCacheError, match="stale"):
        backward(model, cache, np.ones(2))
    _, cache = forward(model, d, d, "train")
    backward(model, cache, np.ones(2))
    with pytest.raises(StaleCacheError, match="consumed"):
        backward(model, cache, np.ones(2))
    _, cache = forward(model, d, d, "eval")
    with pytest.raises(StaleCacheError, match="train-mode"):
        backward(model, cache, np.ones(2))
    other = build_model(ModelConfig.slim())
    _, cache = forward(other, d, d, "train")
    with pytest.raises(StaleCacheError, match="different model"):
        backward(model, cache, np.ones(2))


@pytest.mark.parametrize("variant", ["full", "direct_concat", "distorted_only", "residual_only"])
def test_slim_end_to_end_gradients(variant):
    # every entry for the full variant, a random subset for the others
    assert gradchecks.slim_model(0, variant=variant, max_entries=None if variant == "full" else 12) < 1e-5


# --- whole-image prediction -----------------------------------------------------------

def test_predict_single_patch():
    model = build_model(ModelConfig.slim())
    rng = np.random.default_rng(2)
    d, r = rng.random((64, 64)), rng.random((64, 64))
    s, _ = forward(model, d[None, None], r[None, None], "eval")
    assert predict_image(model, d, r) == pytest.approx(float(s[0]), abs=1e-6)


def test_predict_grid_count_and_mean():
    model = build_model(ModelConfig(fc_sizes=(16, 8, 1)))
    rng = np.random.default_rng(3)
    d = rng.random((384 + 50, 256 + 100))
    r = rng.random(d.shape) * 0.2
    manual = []
    for y in range(0, 384, 128):
        for x in range(0, 256, 128):
            s, _ = forward(model, d[None, None, y:y + 128, x:x + 128],
                           r[None, None, y:y + 128, x:x + 128], "eval")
            manual.append(float(s[0]))
    assert len(manual) == 6
    assert predict_image(model, d, r, batch_size=4) == pytest.approx(np.mean(manual), abs=1e-6)


def test_predict_rejects_small_image():
    model = build_model(ModelConfig.slim())
    with pytest.raises(ImageError):
        predict_image(model, np.zeros((63, 100)), np.zeros((63, 100)))


# --- checkpoints ------------------------------------------------------------------

def _trained_slim():
    model = build_model(ModelConfig.slim(seed=3))
    d = np.random.default_rng(0).random((4, 1, 64, 64))
    forward(model, d, d * 0.1, "train")  # moves running stats away from init
    return model, d


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model, d = _trained_slim()
    path = tmp_path / "m.piqa"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    a, b = model.state(), loaded.state()
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    sa, _ = forward(model, d, d * 0.1, "eval")
    sb, _ = forward(loaded, d, d * 0.1, "eval")
    assert sa.tobytes() == sb.tobytes()


def test_checkpoint_layout(tmp_path):
    model, _ = _trained_slim()
    path = tmp_path / "m.piqa"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"PIQA"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    n = struct.unpack("<I", raw[8:12])[0]
    cfg = raw[12:12 + n].decode("utf-8")
    assert '"variant": "full"' in cfg
    pos = 12 + n
    name_len = struct.unpack("<I", raw[pos:pos + 4])[0]
    name = raw[pos + 4:pos + 4 + name_len].decode()
    assert name == "distorted.conv1.weights"
    pos += 4 + name_len
    rank = struct.unpack("<I", raw[pos:pos + 4])[0]
    dims = struct.unpack(f"<{rank}I", raw[pos + 4:pos + 4 + 4 * rank])
    assert dims == (2, 1, 3, 3)
    pos += 4 + 4 * rank
    first = np.frombuffer(raw[pos:pos + 4 * 18], dtype="<f4")
    np.testing.assert_array_equal(first, model.streams["distorted"].convs[0].weights.ravel())


def test_checkpoint_bad_magic(tmp_path):
    model, _ = _trained_slim()
    path = tmp_path / "m.piqa"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="magic"):
        load_checkpoint(path)
    raw[:4] = b"PIQA"
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model, _ = _trained_slim()
    path = tmp_path / "m.piqa"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_config_and_dimension_mismatch(tmp_path):
    model, _ = _trained_slim()
    path = tmp_path / "m.piqa"
    save_checkpoint(model, path)
    load_checkpoint(path, expected_config=ModelConfig.slim(seed=3))
    with pytest.raises(CheckpointMismatchError, match="does not match"):
        load_checkpoint(path, expected_config=ModelConfig())
    # tamper with the stored config so the tensor records no longer fit
    raw = path.read_bytes()
    n = struct.unpack("<I", raw[8:12])[0]
    cfg = raw[12:12 + n].replace(b'"fpn_channels": 4', b'"fpn_channels": 5')
    path.write_bytes(raw[:8] + struct.pack("<I", len(cfg)) + cfg + raw[12 + n:])
    with pytest.raises(CheckpointMismatchError, match="dims"):
        load_checkpoint(path)
