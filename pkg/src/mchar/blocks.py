"""Decoupled dual cross-attention blocks.

Both blocks share one shape: a query projection of the latent tokens attends
to two separate key/value streams and the second stream is scaled by a
scalar weight. The identity adapter pairs text with fused identity tokens;
the motion block pairs action-phrase tokens with the motion embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numerics import attention_backward, attention_weights


@dataclass
class AdapterParams:
    w_q: np.ndarray
    w_k_text: np.ndarray
    w_v_text: np.ndarray
    w_k_id: np.ndarray
    w_v_id: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        _check(self.w_q, self.w_k_text, self.w_v_text, self.w_k_id, self.w_v_id, self.lam)

    @classmethod
    def init(cls, rng, width, d_txt, d_att, lam=1.0, value_scale=1.0):
        return cls(*_init_mats(rng, width, d_txt, d_att, value_scale), lam=lam)


@dataclass
class MotionBlockParams:
    w_q: np.ndarray
    w_k_action: np.ndarray
    w_v_action: np.ndarray
    w_k_motion: np.ndarray
    w_v_motion: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        _check(self.w_q, self.w_k_action, self.w_v_action, self.w_k_motion, self.w_v_motion, self.alpha)

    @classmethod
    def init(cls, rng, width, d_txt, d_att, alpha=1.0, value_scale=1.0):
        return cls(*_init_mats(rng, width, d_txt, d_att, value_scale), alpha=alpha)


def _check(w_q, k1, v1, k2, v2, scale):
    if scale < 0:
        raise ValueError("branch weight must be non-negative")
    if k1.shape[1] != w_q.shape[1] or k2.shape[1] != w_q.shape[1]:
        raise ValueError("key projections must match the query width")
    if v1.shape[1] != v2.shape[1]:
        raise ValueError("value projections must share an output width")


def _init_mats(rng, width, d_txt, d_att, value_scale):
    s_in, s_txt = 1.0 / np.sqrt(width), 1.0 / np.sqrt(d_txt)
    return (
        rng.standard_normal((width, d_att)) * s_in,
        rng.standard_normal((d_txt, d_att)) * s_txt,
        rng.standard_normal((d_txt, width)) * s_txt * value_scale,
        rng.standard_normal((d_txt, d_att)) * s_txt,
        rng.standard_normal((d_txt, width)) * s_txt * value_scale,
    )


@dataclass
class DualCache:
    z: np.ndarray
    ctx1: np.ndarray
    ctx2: np.ndarray
    q: np.ndarray
    k1: np.ndarray
    v1: np.ndarray
    a1: np.ndarray
    k2: np.ndarray
    v2: np.ndarray
    a2: np.ndarray
    out2: np.ndarray


def _dual_forward(z, ctx1, ctx2, w_q, wk1, wv1, wk2, wv2, scale):
    if z.shape[-1] != w_q.shape[0]:
        raise ValueError(f"latent width {z.shape[-1]} does not match query projection {w_q.shape}")
    if ctx1.shape[-1] != wk1.shape[0] or ctx2.shape[-1] != wk2.shape[0]:
        raise ValueError("condition width does not match key projection")
    if ctx2.shape[0] < 1:
        raise ValueError("second stream needs at least one token")
    q = z @ w_q
    k1, v1 = ctx1 @ wk1, ctx1 @ wv1
    k2, v2 = ctx2 @ wk2, ctx2 @ wv2
    a1 = attention_weights(q, k1)
    a2 = attention_weights(q, k2)
    out = a1 @ v1
    out2 = a2 @ v2
    # Skipping the zero-weight branch keeps the output bitwise free of its inputs.
    if scale != 0:
        out = out + scale * out2
    return out, DualCache(z, ctx1, ctx2, q, k1, v1, a1, k2, v2, a2, out2)


def _dual_backward(c: DualCache, d_out, w_q, wk1, wv1, wk2, wv2, scale):
    dq1, dk1, dv1 = attention_backward(c.q, c.k1, c.v1, c.a1, d_out)
    dq2, dk2, dv2 = attention_backward(c.q, c.k2, c.v2, c.a2, scale * d_out)
    d_q = dq1 + dq2
    z2 = c.z.reshape(-1, c.z.shape[-1])
    grads = (
        z2.T @ d_q.reshape(-1, d_q.shape[-1]),
        c.ctx1.T @ dk1,
        c.ctx1.T @ dv1,
        c.ctx2.T @ dk2,
        c.ctx2.T @ dv2,
        float(np.sum(d_out * c.out2)),
    )
    d_z = d_q @ w_q.T
    d_ctx1 = dk1 @ wk1.T + dv1 @ wv1.T
    d_ctx2 = dk2 @ wk2.T + dv2 @ wv2.T
    return d_z, d_ctx1, d_ctx2, grads


def id_adapter_attention(z, text_emb, c_id, p: AdapterParams, return_cache=False):
    """Text cross-attention plus ``lam`` times identity cross-attention over shared queries."""
    out, cache = _dual_forward(z, text_emb, c_id, p.w_q, p.w_k_text, p.w_v_text, p.w_k_id, p.w_v_id, p.lam)
    return (out, cache) if return_cache else out


def id_adapter_backward(cache: DualCache, d_out, p: AdapterParams):
    """Return ``(d_z, d_text, d_cid, grads)``."""
    d_z, d_t, d_c, g = _dual_backward(cache, d_out, p.w_q, p.w_k_text, p.w_v_text, p.w_k_id, p.w_v_id, p.lam)
    return d_z, d_t, d_c, _gradients(AdapterParams, g)


def _gradients(cls, values):
    # Gradient containers skip validation: the scalar's gradient may be negative.
    grads = cls.__new__(cls)
    for f, v in zip(fields(cls), values):
        setattr(grads, f.name, v)
    return grads


def motion_control_attention(z_prime, e_a, e_m, p: MotionBlockParams, return_cache=False):
    """Action cross-attention plus ``alpha`` times motion cross-attention."""
    out, cache = _dual_forward(
        z_prime, e_a, e_m, p.w_q, p.w_k_action, p.w_v_action, p.w_k_motion, p.w_v_motion, p.alpha
    )
    return (out, cache) if return_cache else out


def motion_control_backward(cache: DualCache, d_out, p: MotionBlockParams):
    """Return ``(d_z, d_action, d_motion, grads)``."""
    d_z, d_a, d_m, g = _dual_backward(
        cache, d_out, p.w_q, p.w_k_action, p.w_v_action, p.w_k_motion, p.w_v_motion, p.alpha
    )
    return d_z, d_a, d_m, _gradients(MotionBlockParams, g)
