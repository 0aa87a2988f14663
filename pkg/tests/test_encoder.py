import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multigran.encoder import (
    EncoderConfig, decode_features, encode_features, explain, explain_weights, get_encoder, position_grid,
    read_features, write_features,
)
from multigran.errors import ConfigError, FormatError, ShapeError
from multigran.numerics import make_rng, relative_error

from gradcheck import CASES, explain_case
from oracles import explain_map_loop


def test_default_grid_is_12x12(features):
    assert features.patches.shape == (12, 12, 64)
    assert features.keys.shape == (12, 12, 64)
    assert features.cls.shape == (64,)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_side=48, patch_size=5)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=30, heads=4)


def test_encoder_is_deterministic(small_encoder_cfg):
    img = make_rng(1).random((24, 24, 3))
    a = get_encoder(small_encoder_cfg).encode(img)
    b = get_encoder(EncoderConfig(**small_encoder_cfg.__dict__)).encode(img)
    assert a.equals(b)


def test_batch_encoding_equals_single(small_encoder_cfg):
    imgs = make_rng(2).random((3, 24, 24, 3))
    enc = get_encoder(small_encoder_cfg)
    batch = enc.encode_batch(imgs)
    for img, f in zip(imgs, batch):
        single = enc.encode(img)
        assert np.allclose(single.patches, f.patches, atol=1e-12)
        assert np.allclose(single.keys, f.keys, atol=1e-12)


def test_encode_rejects_bad_pixels(small_encoder_cfg):
    enc = get_encoder(small_encoder_cfg)
    with pytest.raises(ShapeError):
        enc.encode(np.zeros((20, 24, 3)))
    with pytest.raises(ValueError):
        enc.encode(np.full((24, 24, 3), 2.0))


def test_explain_map_matches_loop_oracle(small_features):
    q = make_rng(3).normal(size=16)
    m = explain(small_features, q)
    assert m.weights.shape == (6, 6)
    assert np.allclose(m.weights.reshape(-1), explain_map_loop(small_features.keys_flat, q), atol=1e-12)
    assert abs(m.weights.sum() - 1.0) < 1e-12


def test_explain_rows_independent_of_batch(small_features):
    q = make_rng(4).normal(size=(9, 16))
    batch = explain_weights(small_features.keys_flat, q)
    for i in range(9):
        assert np.array_equal(batch[i], explain_weights(small_features.keys_flat, q[i : i + 1])[0])


def test_explain_gradient_cases():
    for seed in range(CASES):
        assert relative_error(*explain_case(seed)) < 1e-6


def test_position_grid_shape():
    assert position_grid(6, 16).shape == (6, 6, 16)


def test_features_round_trip(tmp_path, small_features):
    path = tmp_path / "f.mgft"
    write_features(small_features, path)
    assert read_features(path).equals(small_features)
    assert encode_features(decode_features(encode_features(small_features))) == encode_features(small_features)


def test_features_corruption_detected(small_features):
    data = bytearray(encode_features(small_features))
    data[20] ^= 0xFF
    with pytest.raises(FormatError):
        decode_features(bytes(data))
    with pytest.raises(FormatError):
        decode_features(bytes(data[:30]))


def test_orthogonal_query_gives_uniform_map(small_features):
    keys = small_features.keys_flat
    # project a random vector onto the orthogonal complement of the key span
    q = make_rng(6).normal(size=16)
    u, s, vt = np.linalg.svd(keys, full_matrices=True)
    null = vt[np.sum(s > 1e-10):]
    if null.shape[0] == 0:
        q = np.zeros(16)
    else:
        q = null.T @ (null @ q)
    assert np.allclose(explain(small_features, q).weights, 1 / 36, atol=1e-12)


def test_scaled_key_query_concentrates():
    from multigran.encoder import ImageFeatureSet

    cfg = EncoderConfig(image_side=4, patch_size=2, embed_dim=8, layers=1, heads=2)
    keys = np.eye(8)[:4].reshape(2, 2, 8)
    f = ImageFeatureSet(cls=np.zeros(8), patches=keys, keys=keys, config=cfg)
    w = explain(f, 200.0 * keys.reshape(4, 8)[2]).weights.reshape(-1)
    assert w.argmax() == 2 and w[2] > 1 - 1e-12


@given(st.integers(0, 2**31))
def test_map_normalised_and_sharpening(seed):
    rng = make_rng(seed)
    f = _random_features(rng)
    q = rng.normal(size=8)
    w1 = explain(f, q).weights
    w2 = explain(f, 2 * q).weights
    assert abs(w1.sum() - 1) < 1e-9 and (w1 >= 0).all()
    assert w2.max() >= w1.max() - 1e-15


def test_zero_upstream_gives_zero_gradient(small_features):
    from multigran.encoder import explain_backward

    g = explain_backward(small_features, make_rng(8).normal(size=16), np.zeros(36))
    assert not g.any()


def _random_features(rng):
    from multigran.encoder import ImageFeatureSet

    cfg = EncoderConfig(image_side=8, patch_size=2, embed_dim=8, layers=1, heads=2)
    return ImageFeatureSet(cls=rng.normal(size=8), patches=rng.normal(size=(4, 4, 8)), keys=rng.normal(size=(4, 4, 8)), config=cfg)
