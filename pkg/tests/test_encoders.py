import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from wmoe.config import desk_config
from wmoe.data import generate, preset
from wmoe.encoders import (EncoderSpec, FeatureBundle, ImageEncoder, TextEncoder, encode_image,
                           load_features, save_features)
from wmoe.errors import FormatError, InputError
from wmoe.objective import train
from wmoe.model import AnomalyModel
from wmoe.tensor import Tensor, concat, tsum

SPEC = EncoderSpec(seed=3, C=16, grid=(4, 4), n_tap_layers=2, image_size=(16, 16))


def test_shapes():
    b = encode_image(SPEC, np.random.default_rng(0).random((16, 16)))
    assert b.x_c.shape == (16,)
    assert [lid for lid, _ in b.layers] == [1, 2]
    assert b.grids.shape == (2, 4, 4, 16)


def test_constant_input_gives_constant_grids():
    b = encode_image(SPEC, np.full((16, 16), 0.37))
    for _, g in b.layers:
        assert_allclose(g.data, np.broadcast_to(g.data[:1, :1], g.shape), atol=1e-15)


def test_deterministic_per_seed():
    px = np.random.default_rng(1).random((16, 16))
    assert_array_equal(encode_image(SPEC, px).grids, encode_image(SPEC, px).grids)
    other = EncoderSpec(seed=4, C=16, grid=(4, 4), n_tap_layers=2, image_size=(16, 16))
    assert not np.array_equal(encode_image(SPEC, px).grids, encode_image(other, px).grids)


def test_bad_spec_and_input():
    with pytest.raises(InputError):
        EncoderSpec(C=4)
    with pytest.raises(InputError):
        EncoderSpec(grid=(5, 5), image_size=(16, 16))
    with pytest.raises(InputError):
        ImageEncoder(SPEC).encode_batch(np.zeros((1, 8, 8)))


def test_weights_are_read_only():
    enc = ImageEncoder(SPEC)
    with pytest.raises(ValueError):
        enc.patch_embed[0, 0] = 1.0


def test_text_rows_unit_norm_and_slot_gradients():
    text = TextEncoder(SPEC)
    tmpl = text.template(["a", "photo", "of"])
    slots = Tensor(np.random.default_rng(0).normal(0, 0.1, (2, 16)), requires_grad=True)
    emb = text(concat([tmpl, slots], axis=0))
    assert_allclose(np.linalg.norm(emb.data), 1.0, atol=1e-12)
    tsum(emb * Tensor(np.arange(16.0))).backward()
    assert slots.grad is not None and np.any(slots.grad)
    assert tmpl.grad is None


def test_frozen_after_training():
    cfg = desk_config(C=16, grid=(4, 4), image_size=(16, 16), taps=2, epochs=1, batch=4)
    spec = dataclasses.replace(preset("grating"), image_size=(16, 16), defect_scale=(2.0, 4.0))
    model = AnomalyModel(cfg)
    before = {k: v.copy() for k, v in model.frozen_weights().items()}
    train(cfg, generate(spec, 8, 0), model=model)
    for k, v in model.frozen_weights().items():
        assert_array_equal(v, before[k])


def test_feature_dump_round_trip(tmp_path):
    b = encode_image(SPEC, np.random.default_rng(2).random((16, 16)))
    save_features(b, tmp_path / "f.wmfeat")
    back = load_features(tmp_path / "f.wmfeat")
    assert back.source == "file"
    assert_array_equal(back.grids, b.grids.astype(np.float32).astype(np.float64))
    assert_array_equal(back.x_c.data, b.x_c.data.astype(np.float32))


def test_feature_dump_rejects_bad_files(tmp_path):
    b = encode_image(SPEC, np.random.default_rng(2).random((16, 16)))
    p = tmp_path / "f.wmfeat"
    save_features(b, p)
    raw = p.read_bytes()
    for bad in (raw[:-3], b"XXXXXXXX" + raw[8:], raw + b"\0"):
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            load_features(p)
    # swap the two layer ids
    C, n = 16, 4 * 4 * 16
    off2 = 28 + 4 * C + 4 + 4 * n
    swapped = bytearray(raw)
    swapped[28 + 4 * C:28 + 4 * C + 4] = (5).to_bytes(4, "little")
    swapped[off2:off2 + 4] = (2).to_bytes(4, "little")
    p.write_bytes(bytes(swapped))
    with pytest.raises(FormatError) as ei:
        load_features(p)
    assert ei.value.offset == off2


def test_bundle_rejects_unordered_layers():
    g = Tensor(np.zeros((2, 2, 8)))
    with pytest.raises(InputError):
        FeatureBundle(Tensor(np.zeros(8)), [(2, g), (1, g)])
