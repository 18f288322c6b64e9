"""Deterministic stand-ins for the image, face and text encoders, plus identity fusion.

Every stub is a fixed function of ``(input, seed)``: image encoders are seeded
linear projections of mean-centred patches, text is whitespace-tokenised and
looked up in a seeded hash table.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .numerics import MlpParams, attention_backward, attention_weights, mlp_backward, mlp_forward

NULL_TOKEN = "<null>"
MAX_INTENSITY = 20.0
FACE_FRACTION = 0.6
# Feature norms at rounding level (a flat image after centring) count as zero.
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 16
    grid: int = 2
    d: int = 64
    d_txt: int = 64
    seed: int = 0

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class IdentityBundle:
    ref_image: np.ndarray
    face_crop: np.ndarray
    e_clip: np.ndarray
    e_arc: np.ndarray
    c_id: np.ndarray


@dataclass
class FusionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    proj: np.ndarray

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape or self.w_v.shape[1] != self.proj.shape[0]:
            raise ValueError("fusion matrices do not chain")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_att: int, d_txt: int):
        s = 1.0 / np.sqrt(d)
        return cls(
            w_q=rng.standard_normal((d, d_att)) * s,
            w_k=rng.standard_normal((d, d_att)) * s,
            w_v=rng.standard_normal((d, d_att)) * s,
            proj=rng.standard_normal((d_att, d_txt)) / np.sqrt(d_att),
        )


@dataclass
class ActionEmbedding:
    e_a: np.ndarray


@dataclass
class MotionEmbedding:
    e_m: np.ndarray


def _frame(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError("expected a single frame")
        image = image[0]
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got {image.shape}")
    return image


def resize_matrix(n_out: int, lo: float, hi: float, n_in: int) -> np.ndarray:
    """Bilinear sampling matrix mapping the span ``[lo, hi)`` of ``n_in`` samples to ``n_out``."""
    centers = lo + (np.arange(n_out) + 0.5) * (hi - lo) / n_out - 0.5
    # Clamp inside the span so a crop never blends in pixels beyond its box.
    floor = max(lo, 0.0)
    centers = np.clip(centers, floor, max(floor, min(hi - 1.0, n_in - 1.0)))
    i0 = np.floor(centers).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = centers - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def default_face_box(height: int, width: int) -> tuple[int, int, int, int]:
    side = int(round(FACE_FRACTION * min(height, width)))
    y0 = (height - side) // 2
    x0 = (width - side) // 2
    return x0, y0, x0 + side, y0 + side


def crop_face_region(image: np.ndarray, bbox: Optional[Sequence[float]] = None, size: int = 16) -> np.ndarray:
    """Crop ``bbox = (x0, y0, x1, y1)`` (or the central default box) and resample to ``size``."""
    img = _frame(image)
    h, w, _ = img.shape
    if bbox is None:
        bbox = default_face_box(h, w)
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate face box {bbox}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"face box {bbox} outside a {w}x{h} image")
    rows = resize_matrix(size, y0, y1, h)
    cols = resize_matrix(size, x0, x1, w)
    return np.einsum("ah,hwc,bw->abc", rows, img, cols)


@lru_cache(maxsize=64)
def _projection(seed: int, stream: int, rows: int, cols: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stream])
    out = rng.standard_normal((rows, cols)) / np.sqrt(rows)
    out.setflags(write=False)
    return out


def _centred_patches(face: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    face = _frame(face)
    if face.shape[0] != cfg.input_size or face.shape[1] != cfg.input_size:
        raise ValueError(f"encoder expects {cfg.input_size}x{cfg.input_size}, got {face.shape[:2]}")
    g = cfg.grid
    p = cfg.input_size // g
    c = face.shape[2]
    patches = face[: g * p, : g * p].reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * c)
    return patches - patches.mean(axis=1, keepdims=True)


def encode_context_stub(face: np.ndarray, seed: int, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Contextual tokens ``[k, d]``: one seeded projection per patch."""
    patches = _centred_patches(face, cfg)
    return patches @ _projection(seed, 0, patches.shape[1], cfg.d)


def identity_features(face: np.ndarray, seed: int, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Un-normalised identity vector ``[1, d]``; linear in ``face``."""
    patches = _centred_patches(face, cfg)
    return (patches @ _projection(seed, 1, patches.shape[1], cfg.d)).mean(axis=0, keepdims=True)


def normalize_identity(feat: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(feat)
    if norm <= ZERO_NORM:
        warnings.warn("identity embedding collapsed to zero; using the first basis vector", RuntimeWarning)
        out = np.zeros_like(feat)
        out[..., 0] = 1.0
        return out
    return feat / norm


def encode_identity_stub(face: np.ndarray, seed: int, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Unit-norm identity embedding ``[1, d]``; also the loss-side face embedding."""
    return normalize_identity(identity_features(face, seed, cfg))


def face_embedding(image: np.ndarray, bbox=None, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    return encode_identity_stub(crop_face_region(image, bbox, cfg.input_size), cfg.seed, cfg)


def fuse_identity(e_arc, e_clip, p: FusionParams, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Cross-attend the identity token over ``e_clip + e_arc`` and project to text width.

    ``weights`` replaces the softmax weights when given (used to probe linearity).
    """
    if e_arc.shape[-1] != e_clip.shape[-1]:
        raise ValueError("identity and context embeddings must share a width")
    if e_arc.shape[-1] != p.w_q.shape[0]:
        raise ValueError("embedding width does not match fusion parameters")
    e = e_clip + e_arc
    q, k, v = e_arc @ p.w_q, e @ p.w_k, e @ p.w_v
    if weights is None:
        weights = attention_weights(q, k)
    return (weights @ v) @ p.proj


def fuse_identity_backward(e_arc, e_clip, p: FusionParams, d_cid):
    """Parameter gradients of :func:`fuse_identity` for upstream ``d_cid``."""
    e = e_clip + e_arc
    q, k, v = e_arc @ p.w_q, e @ p.w_k, e @ p.w_v
    w = attention_weights(q, k)
    att = w @ v
    d_att = d_cid @ p.proj.T
    d_q, d_k, d_v = attention_backward(q, k, v, w, d_att)
    return FusionParams(
        w_q=e_arc.T @ d_q,
        w_k=e.T @ d_k,
        w_v=e.T @ d_v,
        proj=att.T @ d_cid,
    )


def token_embedding(token: str, seed: int, d_txt: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng([seed, int.from_bytes(digest, "little")])
    return rng.standard_normal(d_txt)


def encode_text(text: str, seed: int, d_txt: int = 64) -> np.ndarray:
    """Token rows ``[t, d_txt]``; the empty string maps to the null token."""
    tokens = text.split() or [NULL_TOKEN]
    return np.stack([token_embedding(t, seed, d_txt) for t in tokens])


def encode_action(phrase: str, seed: int, d_txt: int = 64) -> ActionEmbedding:
    return ActionEmbedding(encode_text(phrase, seed, d_txt))


def embed_motion_intensity(m: float, p: MlpParams) -> MotionEmbedding:
    if not 0.0 <= m <= MAX_INTENSITY:
        raise ValueError(f"motion intensity {m} outside [0, {MAX_INTENSITY:g}]")
    return MotionEmbedding(mlp_forward(p, np.array([[m / MAX_INTENSITY]])))


def embed_motion_backward(m: float, p: MlpParams, d_em: np.ndarray) -> MlpParams:
    _, grads = mlp_backward(p, np.array([[m / MAX_INTENSITY]]), d_em)
    return grads


def build_identity_bundle(
    image: np.ndarray,
    fusion: FusionParams,
    cfg: EncoderConfig = EncoderConfig(),
    bbox=None,
    drop_context: bool = False,
) -> IdentityBundle:
    """Run the full identity path; ``drop_context`` zeroes the contextual tokens."""
    face = crop_face_region(image, bbox, cfg.input_size)
    e_clip = encode_context_stub(face, cfg.seed, cfg)
    if drop_context:
        e_clip = np.zeros_like(e_clip)
    e_arc = encode_identity_stub(face, cfg.seed, cfg)
    c_id = fuse_identity(e_arc, e_clip, fusion)
    if c_id.shape[-1] != cfg.d_txt:
        raise ValueError(f"identity tokens have width {c_id.shape[-1]}, text width is {cfg.d_txt}")
    return IdentityBundle(_frame(image)[None], face, e_clip, e_arc, c_id)
