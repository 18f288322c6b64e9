"""Training objectives with hand-derived gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.1
    # The identity term is evaluated only for sampled steps below this gate.
    id_loss_step_gate: int = 25

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and non-negative")

    def id_loss_active(self, t: int) -> bool:
        return t < self.id_loss_step_gate


def id_consistency_loss(ref_emb: np.ndarray, frame_embs: np.ndarray) -> tuple[float, np.ndarray]:
    """One minus the mean cosine between the reference and each frame embedding.

    Returns the loss and its gradient with respect to ``frame_embs``.
    """
    ref = ref_emb.reshape(-1)
    frames = np.atleast_2d(frame_embs)
    r_norm = np.linalg.norm(ref)
    f_norm = np.linalg.norm(frames, axis=1)
    if r_norm == 0.0 or np.any(f_norm == 0.0):
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    cos = frames @ ref / (f_norm * r_norm)
    n = frames.shape[0]
    d_cos = ref[None, :] / (f_norm[:, None] * r_norm) - cos[:, None] * frames / (f_norm[:, None] ** 2)
    return float(1.0 - cos.mean()), -d_cos / n


def region_aware_loss(eps: np.ndarray, eps_hat: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted noise-prediction error over ``[N, H', W', C]`` latents.

    Channels are summed inside each location's squared residual; the sum is
    normalised by ``N * H' * W'``. Returns the loss and its gradient with
    respect to ``eps_hat``.
    """
    if eps.shape != eps_hat.shape:
        raise ValueError(f"noise shapes differ: {eps.shape} vs {eps_hat.shape}")
    if weights.shape != eps.shape[:-1]:
        raise ValueError(f"weights {weights.shape} do not match locations {eps.shape[:-1]}")
    resid = eps - eps_hat
    count = float(np.prod(eps.shape[:-1]))
    value = float(np.sum(weights * np.sum(resid * resid, axis=-1)) / count)
    return value, -2.0 * weights[..., None] * resid / count


def total_loss(l_r: float, l_id: float, cfg: LossConfig) -> float:
    return l_r + cfg.beta * l_id
