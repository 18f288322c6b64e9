"""Optical flow and the motion quantities derived from it.

The estimator is a coarse-to-fine block matcher: at each of three pyramid levels
every pixel searches integer displacements within ``radius`` of the upsampled
coarser estimate, scoring zero-mean block SSD, then refines each axis with a
parabola through the neighbouring costs. Displacements follow the convention
``frame_b[y + v, x + u] ~ frame_a[y, x]``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nvt1

MIN_SIZE = 16
LEVELS = 3
BLOCK = 8
RADIUS = 4
# Tie-break toward zero displacement; far below any textured-block cost.
PRIOR_WEIGHT = 1e-7
EXACT_MATCH = 1e-12
# Reference blocks with less zero-mean energy than this carry nothing to track.
FLAT_BLOCK = 1e-10
MIN_CURVATURE = 1e-9
WEIGHT_LOW, WEIGHT_HIGH = 1.0, 1.5


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u * self.u + self.v * self.v)

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


@dataclass
class FlowAnnotation:
    flows: list[FlowField]
    tau: list[float]
    masks: list[np.ndarray]
    fg_means: list[float]
    s_counts: list[int]
    intensity: float
    weight_masks: list[np.ndarray] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "tau": [float(t) for t in self.tau],
            "fg_means": [float(f) for f in self.fg_means],
            "s_counts": [int(s) for s in self.s_counts],
            "intensity": float(self.intensity),
        }


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        return frame.mean(axis=-1)
    if frame.ndim == 2:
        return frame
    raise ValueError(f"expected an HxW or HxWxC frame, got shape {frame.shape}")


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _box_sum(x: np.ndarray, block: int, h: int, w: int) -> np.ndarray:
    # Plain slice adds keep all-zero blocks exactly zero.
    rows = x[..., 0:h, :].copy()
    for i in range(1, block):
        rows += x[..., i:i + h, :]
    out = rows[..., :, 0:w].copy()
    for j in range(1, block):
        out += rows[..., :, j:j + w]
    return out


def _match_level(a, b, pred, radius=RADIUS, block=BLOCK, chunk=32):
    h, w = a.shape
    lo, hi = block // 2, block - block // 2 - 1
    ys = np.arange(-lo, h + hi)
    xs = np.arange(-lo, w + hi)
    a_pad = a[np.clip(ys, 0, h - 1)][:, np.clip(xs, 0, w - 1)]

    pred_r = np.rint(pred).astype(np.int64)
    reach = radius + 1
    offs = np.arange(-reach, reach + 1)
    grid = np.stack(np.meshgrid(offs, offs, indexing="ij"), -1).reshape(-1, 2)
    uniq = np.unique(pred_r.reshape(-1, 2), axis=0)
    cands = np.unique((uniq[:, None, :] + grid[None]).reshape(-1, 2), axis=0)

    size = 2 * reach + 1
    local = np.full((h, w, size, size), np.inf)
    area = float(block * block)
    for start in range(0, len(cands), chunk):
        part = cands[start:start + chunk]
        shifted = np.stack([
            b[np.clip(ys + dy, 0, h - 1)][:, np.clip(xs + dx, 0, w - 1)] for dy, dx in part
        ])
        d = a_pad[None] - shifted
        s1 = _box_sum(d, block, h, w)
        s2 = _box_sum(d * d, block, h, w)
        cost = np.maximum(s2 - s1 * s1 / area, 0.0)
        for k, (dy, dx) in enumerate(part):
            ry = dy - pred_r[..., 0]
            rx = dx - pred_r[..., 1]
            sel = (np.abs(ry) <= reach) & (np.abs(rx) <= reach)
            if sel.any():
                local[sel, ry[sel] + reach, rx[sel] + reach] = cost[k][sel]

    inner = local[:, :, 1:-1, 1:-1]
    d_in = np.arange(-radius, radius + 1)
    abs_y = pred_r[..., 0, None, None] + d_in[None, None, :, None]
    abs_x = pred_r[..., 1, None, None] + d_in[None, None, None, :]
    flat = (inner + PRIOR_WEIGHT * (abs_y ** 2 + abs_x ** 2)).reshape(h, w, -1)
    best = np.argmin(flat, axis=-1)
    by, bx = np.divmod(best, 2 * radius + 1)
    iy, ix = by + 1, bx + 1
    yy, xx = np.mgrid[0:h, 0:w]
    c0 = local[yy, xx, iy, ix]
    out = (pred_r + np.stack([by - radius, bx - radius], -1)).astype(np.float64)
    for axis, (cm, cp) in enumerate((
        (local[yy, xx, iy - 1, ix], local[yy, xx, iy + 1, ix]),
        (local[yy, xx, iy, ix - 1], local[yy, xx, iy, ix + 1]),
    )):
        curv = cm - 2.0 * c0 + cp
        ok = (c0 > EXACT_MATCH) & (curv > MIN_CURVATURE) & np.isfinite(cm) & np.isfinite(cp)
        offset = np.zeros_like(c0)
        offset[ok] = np.clip((cm[ok] - cp[ok]) / (2.0 * curv[ok]), -0.5, 0.5)
        out[..., axis] += offset
    s1 = _box_sum(a_pad, block, h, w)
    texture = _box_sum(a_pad * a_pad, block, h, w) - s1 * s1 / area
    out[texture <= FLAT_BLOCK] = 0.0
    return out, np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray) -> FlowField:
    """Dense flow from ``frame_a`` to ``frame_b`` (HxW or HxWxC)."""
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < MIN_SIZE:
        raise ValueError(f"frames must be at least {MIN_SIZE}x{MIN_SIZE}, got {a.shape}")
    pyr_a, pyr_b = [a], [b]
    for _ in range(LEVELS - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))
    est = np.zeros(pyr_a[-1].shape + (2,))
    for level in range(LEVELS - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if est.shape[:2] != la.shape:
            est = 2.0 * np.repeat(np.repeat(est, 2, axis=0), 2, axis=1)[: la.shape[0], : la.shape[1]]
        est, cost = _match_level(la, lb, est)
        if level < LEVELS - 1:
            # A coarse level can lock onto an alias of a periodic texture; keep
            # the zero-centred search wherever it matches better.
            est0, cost0 = _match_level(la, lb, np.zeros_like(est))
            est = np.where((cost0 <= cost)[..., None], est0, est)
    return FlowField(u=est[..., 1], v=est[..., 0])


def mean_flow_threshold(flow: FlowField) -> float:
    return float(flow.magnitude.mean())


def binary_motion_mask(flow: FlowField, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("threshold must be non-negative")
    return flow.magnitude > tau


def foreground_mean_flow(flow: FlowField, mask: np.ndarray) -> tuple[float, int]:
    """Mean magnitude over masked pixels; ``(0.0, 0)`` when the mask is empty."""
    mag = flow.magnitude
    if mask.shape != mag.shape:
        raise ValueError("mask does not match flow shape")
    s = int(np.count_nonzero(mask))
    if s == 0:
        return 0.0, 0
    return float(np.where(mask, mag, 0.0).sum() / s), s


def region_weight_mask(flow: FlowField, mask: np.ndarray) -> np.ndarray:
    fg = np.where(mask, flow.magnitude, 0.0)
    return np.clip(fg / 255.0 + 0.5, WEIGHT_LOW, WEIGHT_HIGH)


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    # Row i averages input interval [i*n_in/n_out, (i+1)*n_in/n_out) with fractional edges.
    m = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def downsample_weight_mask(m_norm: np.ndarray, h: int, w: int) -> np.ndarray:
    big_h, big_w = m_norm.shape
    if h > big_h or w > big_w or h < 1 or w < 1:
        raise ValueError(f"cannot pool {m_norm.shape} to {(h, w)}")
    return _area_matrix(h, big_h) @ m_norm @ _area_matrix(w, big_w).T


def video_motion_intensity(clip: np.ndarray, threads: int = 1) -> tuple[float, FlowAnnotation]:
    """Clip-level motion intensity: mean foreground flow over adjacent frame pairs."""
    clip = np.asarray(clip, dtype=np.float64)
    n = clip.shape[0]
    if n < 2:
        raise ValueError("need at least two frames")
    pairs = [(clip[i], clip[i + 1]) for i in range(n - 1)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flows = list(pool.map(lambda p: estimate_flow(*p), pairs))
    else:
        flows = [estimate_flow(a, b) for a, b in pairs]
    taus, masks, fgs, counts, weights = [], [], [], [], []
    for f in flows:
        tau = mean_flow_threshold(f)
        mask = binary_motion_mask(f, tau)
        fg, s = foreground_mean_flow(f, mask)
        taus.append(tau)
        masks.append(mask)
        fgs.append(fg)
        counts.append(s)
        weights.append(region_weight_mask(f, mask))
    # Frame i pairs with flow (i, i+1); the last frame reuses the final pair.
    weights.append(weights[-1])
    m = float(np.mean(fgs))
    return m, FlowAnnotation(flows, taus, masks, fgs, counts, m, weights)


def write_sidecar(base: str | os.PathLike, ann: FlowAnnotation) -> None:
    """Write ``<base>.flow.nvt1`` (stacked [N-1, H, W, 2] flow) and ``<base>.flow.json``."""
    base = os.fspath(base)
    nvt1.save(base + ".flow.nvt1", np.stack([f.stacked() for f in ann.flows]))
    with open(base + ".flow.json", "w", encoding="utf-8") as fh:
        json.dump(ann.record(), fh, indent=1)
        fh.write("\n")


def read_sidecar(base: str | os.PathLike) -> tuple[np.ndarray, dict]:
    base = os.fspath(base)
    with open(base + ".flow.json", encoding="utf-8") as fh:
        rec = json.load(fh)
    return nvt1.load(base + ".flow.nvt1"), rec


def annotation_from_flows(flows: Sequence[FlowField]) -> FlowAnnotation:
    """Recompute every derived quantity from precomputed pair flows."""
    taus = [mean_flow_threshold(f) for f in flows]
    masks = [binary_motion_mask(f, t) for f, t in zip(flows, taus)]
    fg = [foreground_mean_flow(f, m) for f, m in zip(flows, masks)]
    weights = [region_weight_mask(f, m) for f, m in zip(flows, masks)]
    weights.append(weights[-1])
    means = [x for x, _ in fg]
    return FlowAnnotation(list(flows), taus, masks, means, [s for _, s in fg], float(np.mean(means)), weights)
