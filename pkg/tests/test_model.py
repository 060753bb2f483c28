import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uec import model as M
from uec.tensor import Tensor

from conftest import smooth_image


@pytest.fixture(scope="module")
def fresh():
    return M.init_model(0)


def _make_perturbed():
    """Non-identity model: corrector and lambda head moved off their init."""
    model = M.init_model(1)
    rng = np.random.default_rng(11)
    for name, p in model.params.items():
        if name.startswith(("corrector", "predictor.lambda2")) or name.endswith("bias"):
            p.data = (p.data + rng.normal(0, 0.4, p.shape)).astype(np.float32)
    return model


_PERTURBED = _make_perturbed()


@pytest.fixture(scope="module")
def perturbed():
    return _PERTURBED


def test_param_count(fresh):
    assert M.param_count(fresh) == 8485
    assert 448 + 4640 + 3104 + 33 + 32 + 51 + 3 * (32 + 27) == 8485
    assert M.param_count(M.UecModel({})) == 0


def test_fresh_model_lambdas_are_one(fresh):
    for delta in (-5.0, 0.0, 0.3, 12.0):
        np.testing.assert_allclose(M.predict_lambdas(delta, fresh), 1.0, atol=1e-6)


def test_fresh_model_is_identity(fresh):
    rng = np.random.default_rng(0)
    img, ref = smooth_image(rng, 37, 53), smooth_image(rng)
    out = M.apply(img, M.encode(ref, fresh), fresh)
    assert np.max(np.abs(out - img)) < 1e-3


def test_unit_lambdas_bit_exact(perturbed):
    img = np.random.default_rng(1).random((20, 30, 3)).astype(np.float32)
    np.testing.assert_array_equal(M.correct(img, [1, 1, 1], perturbed), img)


def test_lambda_range(perturbed):
    for delta in np.linspace(-50, 50, 41):
        lam = M.predict_lambdas(float(delta), perturbed)
        assert np.all(lam > -1) and np.all(lam < 2)


def _scalar_oracle(px, lams, model):
    x = px.astype(np.float64)
    for i, lam in enumerate(lams, start=1):
        p = f"corrector.{i}."
        w1, b1 = model[p + "conv1.weight"].data[:, :, 0, 0], model[p + "conv1.bias"].data
        w2, b2 = model[p + "conv2.weight"].data[:, :, 0, 0], model[p + "conv2.bias"].data
        hid = [max(0.0, sum(w1[o, c] * x[c] for c in range(3)) + b1[o]) for o in range(8)]
        hx = np.array([sum(w2[c, o] * hid[o] for o in range(8)) + b2[c] for c in range(3)])
        x = np.clip(lam * x + (1 - lam) * hx, 0, 1)
    return x


def test_correct_matches_scalar_oracle(perturbed):
    rng = np.random.default_rng(2)
    for _ in range(10):
        px = rng.random(3).astype(np.float32)
        lams = rng.uniform(-1, 2, 3)
        got = M.correct(px.reshape(1, 1, 3), lams, perturbed)[0, 0]
        np.testing.assert_allclose(got, _scalar_oracle(px, lams, perturbed), atol=1e-6)


def test_correct_matches_tensor_path(perturbed):
    img = np.random.default_rng(3).random((9, 7, 3)).astype(np.float32)
    lams = np.array([0.3, 1.4, -0.5], np.float32)
    ref = M.to_hwc(M.correct_t(perturbed, Tensor(M.to_chw(img)), Tensor(lams)).data)
    np.testing.assert_allclose(M.correct(img, lams, perturbed), ref, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 20), st.integers(1, 20),
       st.tuples(*[st.floats(-0.99, 1.99)] * 3))
def test_crop_commutes_with_correct(y, x, h, w, lams):
    model = _PERTURBED
    img = np.random.default_rng(4).random((50, 50, 3)).astype(np.float32)
    full = M.correct(img, lams, model)
    crop = M.correct(img[y : y + h, x : x + w], lams, model)
    np.testing.assert_array_equal(crop, full[y : y + h, x : x + w])


def test_tiles_match_whole_image(perturbed):
    img = np.random.default_rng(5).random((300, 400, 3)).astype(np.float32)
    lams = M.predict_lambdas(0.7, perturbed)
    whole = M.correct(img, lams, perturbed)
    tiles = np.empty_like(img)
    for ys in (slice(0, 150), slice(150, 300)):
        for xs in (slice(0, 200), slice(200, 400)):
            tiles[ys, xs] = M.correct(img[ys, xs], lams, perturbed)
    np.testing.assert_array_equal(tiles, whole)


def test_encode_shape_and_black_image(fresh):
    f = M.encode(np.random.default_rng(6).random((40, 60, 3)), fresh)
    assert f.shape == (96,) and np.all(f[64:] >= 0)
    black = M.encode(np.zeros((32, 32, 3), np.float32), fresh)
    np.testing.assert_allclose(black[:64], 0)
    np.testing.assert_allclose(black[64:], np.sqrt(1e-8), rtol=1e-3)


def test_encode_resolution_invariance(fresh):
    img = smooth_image(np.random.default_rng(7), 64, 64)
    up = img.repeat(2, axis=0).repeat(2, axis=1)
    assert np.linalg.norm(M.encode(img, fresh) - M.encode(up, fresh)) < 0.1


def test_encode_shift_invariance(fresh):
    big = smooth_image(np.random.default_rng(8), 68, 68)
    a, b = big[:64, :64], big[4:, 4:]
    fa, fb = M.encode(a, fresh), M.encode(b, fresh)
    assert np.max(np.abs(fa[32:64] - fb[32:64])) < 0.05


def test_thumbnail_bounds():
    img = np.random.default_rng(9).random((300, 600, 3)).astype(np.float32)
    t = M.thumbnail(img)
    assert t.shape == (128, 256, 3)
    assert M.thumbnail(img[:100, :200]) is not None and M.thumbnail(img[:100, :200]).shape == (100, 200, 3)
    np.testing.assert_allclose(M.thumbnail(np.full((512, 512, 3), 0.4, np.float32)), 0.4, atol=1e-6)


def test_predict_delta_zero_for_equal_features(fresh):
    e = M.encode(smooth_image(np.random.default_rng(10)), fresh)
    assert M.predict_delta(e, e, fresh) == 0.0


def test_predict_delta_oracle(perturbed):
    rng = np.random.default_rng(11)
    e_in, e_ref = rng.random(96), rng.random(96)
    p = {k: v.data.astype(np.float64) for k, v in perturbed.params.items()}
    h = np.maximum(p["predictor.diff.weight"] @ (e_ref - e_in) + p["predictor.diff.bias"], 0)
    d = (p["predictor.head.weight"] @ h + p["predictor.head.bias"])[0]
    assert M.predict_delta(e_in, e_ref, perturbed) == pytest.approx(d, abs=1e-5)
    h = np.maximum(p["predictor.lambda1.weight"][:, 0] * 0.8 + p["predictor.lambda1.bias"], 0)
    lam = -1 + 3 / (1 + np.exp(-(p["predictor.lambda2.weight"] @ h + p["predictor.lambda2.bias"])))
    np.testing.assert_allclose(M.predict_lambdas(0.8, perturbed), lam, atol=1e-6)
    with pytest.raises(ValueError, match="96"):
        M.predict_delta(e_in[:10], e_ref, perturbed)


def test_checkpoint_round_trip(perturbed, tmp_path):
    path = tmp_path / "m.ueck"
    M.save(perturbed, path)
    assert path.read_bytes()[:4] == b"UECK"
    back = M.load(path)
    assert M.param_count(back) == M.param_count(perturbed)
    for k, v in perturbed.params.items():
        np.testing.assert_array_equal(back[k].data, v.data)


def _corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))


def test_checkpoint_rejections(perturbed, tmp_path):
    path = tmp_path / "m.ueck"
    M.save(perturbed, path)
    good = path.read_bytes()

    _corrupt(path, lambda r: b"XXXX" + r[4:])
    with pytest.raises(M.CheckpointError, match="bad magic"):
        M.load(path)

    path.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(M.CheckpointError, match="unsupported version"):
        M.load(path)

    path.write_bytes(good[:-8])
    with pytest.raises(M.CheckpointError, match="truncated payload"):
        M.load(path)

    hlen = struct.unpack("<I", good[8:12])[0]
    header = json.loads(good[12 : 12 + hlen])
    header["entries"][1]["shape"] = [15]
    hb = json.dumps(header).encode()
    path.write_bytes(good[:8] + struct.pack("<I", len(hb)) + hb + good[12 + hlen :])
    with pytest.raises(M.CheckpointError, match="encoder.conv1.bias"):
        M.load(path)


def test_feature_sidecar(fresh, tmp_path):
    f = M.encode(smooth_image(np.random.default_rng(12)), fresh)
    M.save_feature(f, tmp_path / "r.uecf")
    np.testing.assert_array_equal(M.load_feature(tmp_path / "r.uecf"), f)
    (tmp_path / "bad").write_bytes(b"UECF\x01\x00\x00\x00" + b"\x00" * 10)
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.load_feature(tmp_path / "bad")
