import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mchar import encoders as E
from mchar.numerics import MlpParams, attention, finite_diff_grad, mlp_forward, relative_error

CFG = E.EncoderConfig()


def bilinear_oracle(img, y0, y1, x0, x1, size):
    # Independent per-pixel evaluation of the same half-pixel-centred bilinear sampling.
    h, w, c = img.shape
    out = np.zeros((size, size, c))
    for a in range(size):
        for b in range(size):
            y = min(max(y0 + (a + 0.5) * (y1 - y0) / size - 0.5, 0.0), h - 1)
            x = min(max(x0 + (b + 0.5) * (x1 - x0) / size - 0.5, 0.0), w - 1)
            iy, ix = int(np.floor(y)), int(np.floor(x))
            jy, jx = min(iy + 1, h - 1), min(ix + 1, w - 1)
            fy, fx = y - iy, x - ix
            out[a, b] = ((1 - fy) * (1 - fx) * img[iy, ix] + (1 - fy) * fx * img[iy, jx]
                         + fy * (1 - fx) * img[jy, ix] + fy * fx * img[jy, jx])
    return out


def test_full_box_crop_is_resized_copy(rng):
    img = rng.random((16, 16, 3))
    assert np.allclose(E.crop_face_region(img, (0, 0, 16, 16), 16), img, atol=1e-14)
    big = rng.random((32, 24, 3))
    assert np.allclose(E.crop_face_region(big, (0, 0, 24, 32), 16), bilinear_oracle(big, 0, 32, 0, 24, 16), atol=1e-12)


def test_default_box_is_central_sixty_percent():
    assert E.default_face_box(100, 100) == (20, 20, 80, 80)
    img = np.zeros((100, 100, 1))
    img[20:80, 20:80] = 1.0
    crop = E.crop_face_region(img, None, 60)
    assert np.array_equal(crop, np.ones((60, 60, 1)))


def test_box_crop_matches_slice_then_resample(rng):
    img = rng.random((40, 40, 3))
    crop = E.crop_face_region(img, (10, 10, 20, 20), 16)
    sliced = img[10:20, 10:20]
    assert np.allclose(crop, bilinear_oracle(sliced, 0, 10, 0, 10, 16), atol=1e-12)


def test_bad_boxes(rng):
    img = rng.random((20, 20, 3))
    with pytest.raises(ValueError):
        E.crop_face_region(img, (5, 5, 5, 10))
    with pytest.raises(ValueError):
        E.crop_face_region(img, (0, 0, 30, 10))


def test_context_stub_determinism_zero_and_locality(rng):
    face = rng.random((16, 16, 3))
    a, b = E.encode_context_stub(face, 3), E.encode_context_stub(face.copy(), 3)
    assert a.shape == (4, 64) and np.array_equal(a, b)
    assert np.array_equal(E.encode_context_stub(np.zeros((16, 16, 3)), 3), np.zeros((4, 64)))
    other = face.copy()
    other[8:, :8] = rng.random((8, 8, 3))  # patch (1, 0) -> token 2
    diff = np.any(E.encode_context_stub(other, 3) != a, axis=1)
    assert diff.tolist() == [False, False, True, False]


def test_context_stub_rejects_wrong_size():
    with pytest.raises(ValueError):
        E.encode_context_stub(np.zeros((12, 12, 3)), 0)


def test_identity_stub_unit_norm_and_self_similarity(rng):
    face = rng.random((16, 16, 3))
    e = E.encode_identity_stub(face, 0)
    assert abs(np.linalg.norm(e) - 1.0) <= 1e-9
    assert abs(float(e[0] @ E.encode_identity_stub(face.copy(), 0)[0]) - 1.0) <= 1e-12


def test_identity_stub_zero_input_falls_back_to_basis_vector():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        e = E.encode_identity_stub(np.full((16, 16, 3), 0.4), 0)
    assert e[0, 0] == 1.0 and np.count_nonzero(e) == 1
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_independent_images_have_low_cosine():
    # 100 seeded pairs; the measured |cos| distribution at d=64 tops out near 0.36.
    cos = []
    for i in range(100):
        r = np.random.default_rng(5000 + i)
        a = E.encode_identity_stub(r.random((16, 16, 3)), 0)[0]
        b = E.encode_identity_stub(r.random((16, 16, 3)), 0)[0]
        cos.append(abs(float(a @ b)))
    assert max(cos) < 0.5


@given(st.integers(0, 1000))
def test_identity_stub_always_unit(seed):
    face = np.random.default_rng(seed).standard_normal((16, 16, 3))
    assert abs(np.linalg.norm(E.encode_identity_stub(face, seed % 7)) - 1.0) <= 1e-9


def _fusion(rng, d=64, d_att=32, d_txt=64):
    return E.FusionParams.init(rng, d, d_att, d_txt)


def test_fusion_single_token_is_projected_value(rng):
    p = _fusion(rng)
    arc, clip = rng.standard_normal((1, 64)), rng.standard_normal((1, 64))
    expected = ((clip + arc) @ p.w_v) @ p.proj
    assert np.allclose(E.fuse_identity(arc, clip, p), expected, rtol=1e-14, atol=0)


def test_fusion_zero_projection(rng):
    p = _fusion(rng)
    p.proj = np.zeros_like(p.proj)
    out = E.fuse_identity(rng.standard_normal((1, 64)), rng.standard_normal((4, 64)), p)
    assert np.array_equal(out, np.zeros((1, 64)))


def test_fusion_three_token_composition(rng):
    p = _fusion(rng)
    arc, clip = rng.standard_normal((1, 64)), rng.standard_normal((3, 64))
    e = clip + np.repeat(arc, 3, axis=0)
    expected = attention(arc @ p.w_q, e @ p.w_k, e @ p.w_v) @ p.proj
    assert relative_error(E.fuse_identity(arc, clip, p), expected) < 1e-13


@given(st.integers(0, 1000), st.floats(0.1, 10.0))
def test_fusion_linear_in_values_with_frozen_weights(seed, c):
    r = np.random.default_rng(seed)
    p = _fusion(r, d=8, d_att=4, d_txt=6)
    arc, clip = r.standard_normal((1, 8)), r.standard_normal((3, 8))
    w = r.dirichlet(np.ones(3))[None]
    base = E.fuse_identity(arc, clip, p, weights=w)
    scaled = E.fuse_identity(c * arc, c * clip, p, weights=w)
    assert np.allclose(scaled, c * base, rtol=1e-12, atol=1e-12)


def test_fusion_dimension_errors(rng):
    with pytest.raises(ValueError):
        E.fuse_identity(np.ones((1, 64)), np.ones((4, 32)), _fusion(rng))
    with pytest.raises(ValueError):
        E.FusionParams(np.ones((4, 3)), np.ones((4, 2)), np.ones((4, 3)), np.ones((3, 2)))


def test_fusion_backward(rng):
    p = _fusion(rng, d=6, d_att=4, d_txt=5)
    arc, clip = rng.standard_normal((1, 6)), rng.standard_normal((3, 6))
    up = rng.standard_normal((1, 5))
    g = E.fuse_identity_backward(arc, clip, p, up)
    for name in ("w_q", "w_k", "w_v", "proj"):
        def f(val, name=name):
            q = E.FusionParams(**{**p.__dict__, name: val})
            return np.sum(up * E.fuse_identity(arc, clip, q))
        assert relative_error(getattr(g, name), finite_diff_grad(f, getattr(p, name))) < 1e-8


def test_text_stub_tokens():
    null = E.encode_text("", 0)
    assert null.shape == (1, 64)
    assert np.array_equal(null, E.token_embedding(E.NULL_TOKEN, 0, 64)[None])
    assert np.array_equal(E.encode_action("smiling", 0).e_a, E.encode_action("smiling", 0).e_a)
    two = E.encode_action("open mouth", 0).e_a
    assert two.shape == (2, 64)
    assert np.array_equal(two[0], E.token_embedding("open", 0, 64))
    assert np.array_equal(two[1], E.token_embedding("mouth", 0, 64))
    assert not np.array_equal(E.encode_text("open", 1), two[:1])


def test_token_table_is_a_seeded_hash_lookup():
    import hashlib

    digest = hashlib.blake2b(b"open", digest_size=8).digest()
    ref = np.random.default_rng([0, int.from_bytes(digest, "little")]).standard_normal(64)
    assert np.array_equal(E.token_embedding("open", 0, 64), ref)


def _motion_mlp(rng, zero=False):
    p = MlpParams.init(rng, 1, 16, 64)
    if zero:
        p = MlpParams(np.zeros_like(p.w1), np.zeros_like(p.b1), np.zeros_like(p.w2), np.zeros_like(p.b2))
    return p


def test_motion_embedding_cases(rng):
    zero = _motion_mlp(rng, zero=True)
    for m in (0.0, 7.0, 20.0):
        assert np.array_equal(E.embed_motion_intensity(m, zero).e_m, np.zeros((1, 64)))
    p = _motion_mlp(rng)
    assert np.array_equal(E.embed_motion_intensity(0.0, p).e_m, np.zeros((1, 64)))
    p.b1 = rng.standard_normal(p.b1.shape)
    p.b2 = rng.standard_normal(p.b2.shape)
    assert np.array_equal(E.embed_motion_intensity(10.0, p).e_m, mlp_forward(p, np.array([[0.5]])))
    for bad in (-0.1, 20.5):
        with pytest.raises(ValueError):
            E.embed_motion_intensity(bad, p)


def test_bundle_widths(rng):
    img = rng.random((32, 32, 3))
    b = E.build_identity_bundle(img, _fusion(rng))
    assert b.c_id.shape == (1, CFG.d_txt)
    assert abs(np.linalg.norm(b.e_arc) - 1.0) <= 1e-9
    assert b.ref_image.shape == (1, 32, 32, 3) and b.face_crop.shape == (16, 16, 3)
    with pytest.raises(ValueError):
        E.build_identity_bundle(img, _fusion(rng, d_txt=32))
    dropped = E.build_identity_bundle(img, _fusion(rng), drop_context=True)
    assert not dropped.e_clip.any()


def test_encoders_are_deterministic(rng):
    img = rng.random((32, 32, 3))
    f = _fusion(np.random.default_rng(0))
    a = E.build_identity_bundle(img, f)
    b = E.build_identity_bundle(img.copy(), f)
    for name in ("face_crop", "e_clip", "e_arc", "c_id"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
