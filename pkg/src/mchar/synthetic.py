"""Seeded toy data: textured frames, translating sprites, latent training clips and captions."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

ACTIONS = ("smiling", "nodding", "turning head", "talking", "blinking", "laughing")
SUBJECTS = ("a woman", "a man", "a person", "an old man", "a young woman")
SETTINGS = ("in a park", "indoors", "at a desk", "on a street", "against a plain wall")


def smooth_texture(rng: np.random.Generator, shape, sigma: float = 1.5) -> np.ndarray:
    """Blurred uniform noise rescaled to ``[0, 1]``."""
    tex = gaussian_filter(rng.random(shape), sigma)
    return (tex - tex.min()) / (tex.max() - tex.min())


def sprite_translation_clip(
    speed: int, frames: int = 5, size: int = 64, sprite: int = 20, background: float = 0.3, seed: int = 1
) -> np.ndarray:
    """A textured square moving ``speed`` px/frame to the right over a flat background."""
    if sprite + 8 + speed * (frames - 1) > size:
        raise ValueError("sprite leaves the frame")
    tex = smooth_texture(np.random.default_rng(seed), (sprite, sprite), 1.0)
    out = np.full((frames, size, size, 1), background)
    y0 = (size - sprite) // 2
    for i in range(frames):
        x0 = 8 + speed * i
        out[i, y0:y0 + sprite, x0:x0 + sprite, 0] = tex
    return out


def static_clip(frames: int = 5, size: int = 64, seed: int = 2) -> np.ndarray:
    img = smooth_texture(np.random.default_rng(seed), (size, size))
    return np.repeat(img[None, ..., None], frames, axis=0)


def noise_clip(frames: int, size: int, channels: int = 3, seed: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).random((frames, size, size, channels))


def orbit_latent_clip(
    speed: float, frames: int = 16, size: int = 8, channels: int = 4, radius: float = 1.6, seed: int = 0
) -> np.ndarray:
    """Latent clip ``[N, H, W, C]``: a static background plus a soft sprite circling at ``speed``.

    The background and the sprite's appearance depend only on ``seed``, so clips
    sharing a seed differ only in how far the sprite travels per frame.
    """
    rng = np.random.default_rng(seed)
    bg = gaussian_filter(rng.standard_normal((size, size, channels)), (0.7, 0.7, 0)) * 1.5
    coef = rng.standard_normal((3, channels))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    out = np.empty((frames, size, size, channels))
    for f in range(frames):
        theta = speed * f / radius
        dy, dx = yy - (c + radius * math.sin(theta)), xx - (c + radius * math.cos(theta))
        env = np.exp(-(dy * dy + dx * dx) / (2 * 1.3 ** 2))
        basis = np.stack([np.ones_like(dy), np.sin(1.3 * dx), np.cos(1.3 * dy)], -1)
        out[f] = bg + env[..., None] * (basis @ coef) * 1.5
    return out


def caption(rng: np.random.Generator) -> tuple[str, str]:
    """A ``(caption, action phrase)`` pair for toy manifests."""
    action = ACTIONS[rng.integers(len(ACTIONS))]
    subject = SUBJECTS[rng.integers(len(SUBJECTS))]
    setting = SETTINGS[rng.integers(len(SETTINGS))]
    return f"{subject} {action} {setting}", action
