import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import shift as nd_shift

from mchar import flow, synthetic
from mchar.flow import FlowField


def texture(seed=4, size=64):
    return synthetic.smooth_texture(np.random.default_rng(seed), (size, size), 2.0)


def exhaustive_match(a, b, y, x, radius=4, block=8):
    # Integer zero-mean SSD search around one pixel, no pyramid.
    ref = a[y - 4:y + 4, x - 4:x + 4]
    ref = ref - ref.mean()
    best, arg = np.inf, None
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            cand = b[y + dy - 4:y + dy + 4, x + dx - 4:x + dx + 4]
            cost = np.sum((ref - (cand - cand.mean())) ** 2)
            if cost < best - 1e-12:
                best, arg = cost, (dx, dy)
    return arg


def field(mag_values):
    u = np.asarray(mag_values, dtype=np.float64)
    return FlowField(u=u, v=np.zeros_like(u))


def test_identical_frames_give_zero_field():
    a = texture()
    f = flow.estimate_flow(a, a.copy())
    assert not f.u.any() and not f.v.any()


def test_two_pixel_shift_matches_exhaustive_oracle():
    a = texture()
    b = np.roll(a, 2, axis=1)
    f = flow.estimate_flow(a, b)
    inner = (slice(12, -12), slice(12, -12))
    assert np.all(np.abs(f.u[inner] - 2.0) <= 0.25)
    assert np.all(np.abs(f.v[inner]) <= 0.25)
    for y, x in [(16, 16), (20, 40), (32, 32), (45, 27)]:
        dx, dy = exhaustive_match(a, b, y, x)
        assert (round(f.u[y, x]), round(f.v[y, x])) == (dx, dy) == (2, 0)


@pytest.mark.parametrize("cell", [2, 3, 4, 5, 6])
def test_checkerboard_diagonal_shift(cell):
    n = 64
    yy, xx = np.mgrid[0:n + 4, 0:n + 4]
    board = ((yy // cell + xx // cell) % 2).astype(float)
    a, b = board[2:2 + n, 2:2 + n], board[1:1 + n, 1:1 + n]
    mag = flow.estimate_flow(a, b).magnitude[8:-8, 8:-8]
    assert np.all(np.abs(mag - np.sqrt(2.0)) <= 0.25)


@pytest.mark.parametrize("dx", [0.5, 1.5, 2.25, 3.7])
def test_subpixel_translation_mean_error(dx):
    a = texture()
    b = nd_shift(a, (0, dx), order=3, mode="nearest")
    f = flow.estimate_flow(a, b)
    inner = (slice(12, -12), slice(12, -12))
    assert np.mean(np.abs(f.u[inner] - dx)) <= 0.25
    assert abs(np.mean(f.u[inner]) - dx) <= 0.25


def test_estimator_input_checks():
    with pytest.raises(ValueError):
        flow.estimate_flow(np.zeros((12, 40)), np.zeros((12, 40)))
    with pytest.raises(ValueError):
        flow.estimate_flow(np.zeros((20, 20)), np.zeros((20, 24)))


def test_colour_frames_use_channel_mean():
    a = texture()
    rgb = np.stack([a, a, a], -1)
    f1 = flow.estimate_flow(rgb, np.roll(rgb, 1, axis=0))
    gray = flow.to_gray(rgb)
    f2 = flow.estimate_flow(gray, np.roll(gray, 1, axis=0))
    assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.v, f2.v)


def test_mean_threshold_cases():
    assert flow.mean_flow_threshold(field(np.zeros((4, 4)))) == 0.0
    assert flow.mean_flow_threshold(field(np.full((4, 4), 3.0))) == 3.0
    m = np.zeros((4, 4))
    m[0, :] = 2.0
    assert flow.mean_flow_threshold(field(m)) == 0.5


def test_binary_mask_cases():
    assert not flow.binary_motion_mask(field(np.zeros((4, 4))), 0.0).any()
    uniform = field(np.full((4, 4), 2.5))
    assert not flow.binary_motion_mask(uniform, flow.mean_flow_threshold(uniform)).any()
    m = np.zeros((4, 4))
    m[1, 1] = m[2, 3] = m[0, 2] = m[3, 0] = 2.0
    mask = flow.binary_motion_mask(field(m), 0.5)
    assert mask.sum() == 4 and np.array_equal(mask, m > 0)
    with pytest.raises(ValueError):
        flow.binary_motion_mask(field(m), -1.0)


def test_foreground_mean_cases(rng):
    assert flow.foreground_mean_flow(field(np.ones((3, 3))), np.zeros((3, 3), bool)) == (0.0, 0)
    m = np.zeros((4, 4))
    m[0, :] = 2.0
    assert flow.foreground_mean_flow(field(m), m > 0) == (2.0, 4)
    u, v = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    mask = rng.random((5, 5)) > 0.5
    total, count = 0.0, 0
    for y in range(5):
        for x in range(5):
            if mask[y, x]:
                total += np.hypot(u[y, x], v[y, x])
                count += 1
    got = flow.foreground_mean_flow(FlowField(u, v), mask)
    assert got[1] == count and abs(got[0] - total / count) <= 1e-12
    with pytest.raises(ValueError):
        flow.foreground_mean_flow(FlowField(u, v), mask[:4])


def test_weight_mask_anchor_values():
    mags = np.array([[0.0, 127.5, 255.0, 400.0]])
    on = np.ones_like(mags, dtype=bool)
    w = flow.region_weight_mask(field(mags), on)
    assert w.tolist() == [[1.0, 1.0, 1.5, 1.5]]
    assert flow.region_weight_mask(field(mags), ~on).tolist() == [[1.0] * 4]


@given(st.integers(0, 10_000), st.floats(0.1, 500))
def test_weight_mask_bounds(seed, scale):
    r = np.random.default_rng(seed)
    f = FlowField(r.standard_normal((6, 6)) * scale, r.standard_normal((6, 6)) * scale)
    mask = flow.binary_motion_mask(f, flow.mean_flow_threshold(f))
    w = flow.region_weight_mask(f, mask)
    assert np.all((w >= 1.0) & (w <= 1.5))
    assert np.all(w[~mask] == 1.0)


@given(st.integers(0, 10_000))
def test_mask_never_covers_a_nonconstant_field(seed):
    r = np.random.default_rng(seed)
    f = FlowField(r.standard_normal((5, 5)), r.standard_normal((5, 5)))
    assert flow.binary_motion_mask(f, flow.mean_flow_threshold(f)).sum() < 25


def test_downsample_cases(rng):
    assert np.allclose(flow.downsample_weight_mask(np.full((8, 8), 1.2), 3, 5), 1.2, rtol=0, atol=1e-15)
    assert flow.downsample_weight_mask(np.array([[1.0, 1.0], [1.5, 1.5]]), 1, 1)[0, 0] == 1.25
    m = rng.uniform(1.0, 1.5, (8, 8))
    oracle = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            oracle[i, j] = m[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
    assert np.allclose(flow.downsample_weight_mask(m, 4, 4), oracle, atol=1e-15)
    odd = flow.downsample_weight_mask(m, 3, 3)
    assert np.all((odd >= 1.0) & (odd <= 1.5))
    assert abs(odd.mean() - m.mean()) <= 1e-12
    with pytest.raises(ValueError):
        flow.downsample_weight_mask(m, 9, 4)


def test_intensity_of_static_and_constant_pairs():
    m, ann = flow.video_motion_intensity(synthetic.static_clip(frames=4))
    assert m == 0.0 and ann.s_counts == [0, 0, 0]
    m, ann = flow.video_motion_intensity(synthetic.sprite_translation_clip(2, frames=3))
    assert m == pytest.approx(2.0, abs=0.25) and len(ann.flows) == 2
    assert len(ann.weight_masks) == 3 and ann.weight_masks[2] is ann.weight_masks[1]


def test_intensity_averages_pair_means():
    ann = flow.annotation_from_flows([field(np.pad(np.ones((2, 2)), 1)), field(np.pad(np.full((2, 2), 3.0), 1))])
    assert ann.fg_means == [1.0, 3.0] and ann.intensity == 2.0


def test_intensity_needs_two_frames():
    with pytest.raises(ValueError):
        flow.video_motion_intensity(np.zeros((1, 32, 32, 1)))


def test_brightness_offset_invariance():
    clip = synthetic.sprite_translation_clip(3)
    shifted = clip + np.arange(5)[:, None, None, None] * 0.1
    assert flow.video_motion_intensity(shifted)[0] == pytest.approx(flow.video_motion_intensity(clip)[0], abs=1e-9)


def test_threads_do_not_change_results():
    clip = synthetic.sprite_translation_clip(2)
    a = flow.video_motion_intensity(clip, threads=1)[1]
    b = flow.video_motion_intensity(clip, threads=3)[1]
    assert a.record() == b.record()
    assert all(np.array_equal(x.u, y.u) for x, y in zip(a.flows, b.flows))


def test_sidecar_round_trip(tmp_path):
    _, ann = flow.video_motion_intensity(synthetic.sprite_translation_clip(1, frames=3))
    flow.write_sidecar(tmp_path / "clip", ann)
    stacked, rec = flow.read_sidecar(tmp_path / "clip")
    assert stacked.shape == (2, 64, 64, 2)
    assert rec == ann.record()
    again = flow.annotation_from_flows([FlowField(s[..., 0], s[..., 1]) for s in stacked])
    assert again.record() == ann.record()
