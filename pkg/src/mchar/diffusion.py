"""Toy latent video diffusion: schedule, conditional denoiser, training step and guided DDIM.

The denoiser works on ``[N, H', W', C]`` latents, one token per latent location.
Each layer modulates its tokens by the timestep (scale and shift), mixes tokens
inside every frame, runs the identity adapter and then the motion block, and
finishes with a pointwise feed-forward; all four updates are residual. The
network's head produces a clean-latent guess ``D`` which is turned into a noise
prediction through a shrinkage gain,

    eps_hat = k * sigma / (abar * v + sigma^2) * (z_t - sqrt(abar) * D),

the posterior-mean noise for data of variance ``v`` centred on ``D``. With
every parameter zero the prediction is exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import blocks, encoders, losses
from .blocks import AdapterParams, MotionBlockParams
from .encoders import EncoderConfig, FusionParams, IdentityBundle
from .numerics import MlpParams, mlp_backward, mlp_forward

EMBED_DIM = 16
TIME_PERIOD = 1000.0
FRAME_PERIOD = 100.0
ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    def check_step(self, t: int) -> int:
        if not 0 <= int(t) < self.T:
            raise ValueError(f"step {t} outside [0, {self.T})")
        return int(t)


def forward_noise(z0: np.ndarray, t: int, noise: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    t = s.check_step(t)
    if z0.shape != noise.shape:
        raise ValueError(f"latent {z0.shape} and noise {noise.shape} differ")
    ab = s.alpha_bars[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def estimate_z0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    t = s.check_step(t)
    ab = s.alpha_bars[t]
    if ab <= ALPHA_BAR_FLOOR:
        raise ValueError(f"alpha_bar at step {t} is below the numeric floor")
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def sinusoidal(x, dim: int = EMBED_DIM, period: float = TIME_PERIOD) -> np.ndarray:
    """Sine/cosine features of ``x`` (scalar or vector) at geometric frequencies."""
    freqs = np.exp(-math.log(period) * np.arange(dim // 2) / (dim // 2))
    ang = np.multiply.outer(np.asarray(x, dtype=np.float64), freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ----------------------------------------------------------------------------
# Decoder stub


@dataclass(frozen=True)
class LatentDecoder:
    """Fixed linear latent-to-pixel map: bilinear upsampling then a seeded channel mix."""

    seed: int = 0
    scale: int = 4
    latent_channels: int = 4
    image_channels: int = 3

    def channel_mix(self) -> np.ndarray:
        return _channel_mix(self.seed, self.latent_channels, self.image_channels)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[-1] != self.latent_channels:
            raise ValueError(f"expected [N, H, W, {self.latent_channels}] latents, got {z.shape}")
        _, h, w, _ = z.shape
        rows, cols = _upsample(h, self.scale), _upsample(w, self.scale)
        return np.einsum("ah,nhwc,bw,cd->nabd", rows, z, cols, self.channel_mix(), optimize=True)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Least-squares inverse of :meth:`decode` (exact on the decoder's range)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[-1] != self.image_channels:
            raise ValueError(f"expected [N, H, W, {self.image_channels}] frames, got {x.shape}")
        _, big_h, big_w, _ = x.shape
        if big_h % self.scale or big_w % self.scale:
            raise ValueError(f"frame size {big_h}x{big_w} is not a multiple of {self.scale}")
        h, w = big_h // self.scale, big_w // self.scale
        rows = np.linalg.pinv(_upsample(h, self.scale))
        cols = np.linalg.pinv(_upsample(w, self.scale))
        mix = np.linalg.pinv(self.channel_mix())
        return np.einsum("ha,nabd,wb,dc->nhwc", rows, x, cols, mix, optimize=True)


@lru_cache(maxsize=8)
def _channel_mix(seed: int, c_in: int, c_out: int) -> np.ndarray:
    m = np.random.default_rng([seed, 7]).standard_normal((c_in, c_out)) / math.sqrt(c_in)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=8)
def _upsample(n: int, scale: int) -> np.ndarray:
    m = encoders.resize_matrix(n * scale, 0, n, n)
    m.setflags(write=False)
    return m


def decode_frames(z: np.ndarray, decoder: LatentDecoder = LatentDecoder()) -> np.ndarray:
    return decoder.decode(z)


def encode_frames(x: np.ndarray, decoder: LatentDecoder = LatentDecoder()) -> np.ndarray:
    return decoder.encode(x)


@lru_cache(maxsize=8)
def identity_jacobian(decoder: LatentDecoder, cfg: EncoderConfig, h: int, w: int) -> np.ndarray:
    """Matrix ``A`` with ``identity_features(crop(decode(z))) = vec(z) @ A`` for one latent frame.

    Decoding, cropping and the un-normalised identity features are all linear,
    so probing the latent basis recovers the map exactly.
    """
    n = h * w * decoder.latent_channels
    basis = np.eye(n).reshape(n, h, w, decoder.latent_channels)
    frames = decoder.decode(basis)
    rows = np.stack([
        encoders.identity_features(encoders.crop_face_region(f, None, cfg.input_size), cfg.seed, cfg)[0]
        for f in frames
    ])
    rows.setflags(write=False)
    return rows


# ----------------------------------------------------------------------------
# Parameters


@dataclass
class LayerParams:
    film_scale: np.ndarray
    film_shift: np.ndarray
    mix: np.ndarray
    ffn: MlpParams
    adapter: AdapterParams
    motion: MotionBlockParams


@dataclass
class DenoiserParams:
    """Every trainable array of the toy model plus the frozen branch weights."""

    w_in: np.ndarray
    b_in: np.ndarray
    pos: np.ndarray
    w_time: np.ndarray
    w_frame: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    gain: np.ndarray
    log_var: np.ndarray
    fusion: FusionParams
    motion_mlp: MlpParams
    layers: list[LayerParams]

    @property
    def L(self) -> int:
        return len(self.layers)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        tokens: int = 64,
        channels: int = 4,
        width: int = 64,
        hidden: int = 256,
        layers: int = 2,
        d: int = 64,
        d_txt: int = 64,
        d_att: int = 32,
        lam: float = 1.0,
        alpha: float = 1.0,
        log_var: float = math.log(0.01),
    ) -> "DenoiserParams":
        e = EMBED_DIM
        lay = []
        for _ in range(layers):
            lay.append(LayerParams(
                film_scale=np.zeros((e, width)),
                film_shift=np.zeros((e, width)),
                mix=rng.standard_normal((tokens, tokens)) * 0.01,
                ffn=MlpParams.init(rng, width, hidden, width),
                adapter=AdapterParams.init(rng, width, d_txt, d_att, lam=lam),
                motion=MotionBlockParams.init(rng, width, d_txt, d_att, alpha=alpha),
            ))
        return cls(
            w_in=rng.standard_normal((channels, width)) / math.sqrt(channels),
            b_in=np.zeros(width),
            pos=rng.standard_normal((tokens, width)) * 0.1,
            w_time=rng.standard_normal((e, width)) * 0.25,
            w_frame=rng.standard_normal((e, width)) * 0.25,
            w_out=rng.standard_normal((width, channels)) * 0.1 / math.sqrt(width),
            b_out=np.zeros(channels),
            gain=np.array(1.0),
            log_var=np.array(float(log_var)),
            fusion=FusionParams.init(rng, d, d_att, d_txt),
            motion_mlp=MlpParams.init(rng, 1, d_txt, d_txt),
            layers=lay,
        )

    def flatten(self) -> dict[str, np.ndarray]:
        """Name -> array view of every trainable tensor (shared storage)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                out[f.name] = v
            elif f.name == "layers":
                for i, layer in enumerate(v):
                    for lf in fields(layer):
                        lv = getattr(layer, lf.name)
                        if isinstance(lv, np.ndarray):
                            out[f"layers.{i}.{lf.name}"] = lv
                        else:
                            _flatten_into(out, f"layers.{i}.{lf.name}", lv)
            else:
                _flatten_into(out, f.name, v)
        return out

    def scalars(self) -> dict[str, float]:
        """Frozen branch weights, stored alongside the tensors in checkpoints."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.adapter.lam"] = float(layer.adapter.lam)
            out[f"layers.{i}.motion.alpha"] = float(layer.motion.alpha)
        return out

    def map(self, fn) -> "DenoiserParams":
        """New params with every trainable array replaced by ``fn(name, array)``."""
        # 0-d arithmetic yields numpy scalars; keep every entry an ndarray.
        flat = {k: np.asarray(fn(k, v), dtype=np.float64) for k, v in self.flatten().items()}
        return self.from_flat(flat, self.scalars(), like=self)

    @classmethod
    def from_flat(cls, flat: dict, scalars: dict, like: Optional["DenoiserParams"] = None) -> "DenoiserParams":
        n_layers = 1 + max((int(k.split(".")[1]) for k in flat if k.startswith("layers.")), default=-1)

        def sub(prefix, kind, extra=None):
            kw = {f.name: flat[f"{prefix}.{f.name}"] for f in fields(kind)
                  if f"{prefix}.{f.name}" in flat}
            kw.update(extra or {})
            return kind(**kw)

        layers = []
        for i in range(n_layers):
            p = f"layers.{i}"
            act = like.layers[i].ffn.activation if like is not None else "gelu"
            layers.append(LayerParams(
                film_scale=flat[f"{p}.film_scale"],
                film_shift=flat[f"{p}.film_shift"],
                mix=flat[f"{p}.mix"],
                ffn=sub(f"{p}.ffn", MlpParams, {"activation": act}),
                adapter=sub(f"{p}.adapter", AdapterParams, {"lam": scalars.get(f"{p}.adapter.lam", 1.0)}),
                motion=sub(f"{p}.motion", MotionBlockParams, {"alpha": scalars.get(f"{p}.motion.alpha", 1.0)}),
            ))
        top = {f.name: flat[f.name] for f in fields(cls) if f.name in flat}
        return cls(
            **top,
            fusion=sub("fusion", FusionParams),
            motion_mlp=sub("motion_mlp", MlpParams),
            layers=layers,
        )

    def copy(self) -> "DenoiserParams":
        return self.map(lambda k, v: np.array(v, copy=True))


def _flatten_into(out: dict, prefix: str, obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            out[f"{prefix}.{f.name}"] = v


def set_branch_weights(p: DenoiserParams, lam: Optional[float] = None, alpha: Optional[float] = None) -> DenoiserParams:
    """Copy of ``p`` with every layer's identity weight and/or motion weight replaced."""
    layers = []
    for layer in p.layers:
        a = layer.adapter if lam is None else replace(layer.adapter, lam=lam)
        m = layer.motion if alpha is None else replace(layer.motion, alpha=alpha)
        layers.append(replace(layer, adapter=a, motion=m))
    return replace(p, layers=layers)


# ----------------------------------------------------------------------------
# Conditioning


@dataclass
class Conditions:
    """Token sets fed to the denoiser; null substitutes already applied."""

    text: np.ndarray
    c_id: np.ndarray
    action: np.ndarray
    e_m: np.ndarray


@dataclass
class TrainSample:
    z0: np.ndarray
    bundle: IdentityBundle
    text: np.ndarray
    action: np.ndarray
    intensity: float
    weights: np.ndarray
    drop_text: Optional[bool] = None
    drop_image: Optional[bool] = None
    drop_context: Optional[bool] = None
    drop_motion: Optional[bool] = None

    def __post_init__(self):
        if self.weights.shape != self.z0.shape[:-1]:
            raise ValueError(f"weights {self.weights.shape} do not match latent grid {self.z0.shape[:-1]}")


@dataclass(frozen=True)
class DropoutRates:
    text: float = 0.05
    image: float = 0.05
    context: float = 0.5
    motion: float = 0.05


def null_text(cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    return encoders.encode_text("", cfg.seed, cfg.d_txt)


def null_conditions(p: DenoiserParams, cfg: EncoderConfig = EncoderConfig()) -> Conditions:
    """Conditions with every input dropped; a function of the configuration only."""
    tok = null_text(cfg)
    return Conditions(tok, np.zeros((1, cfg.d_txt)), tok.copy(), np.zeros((1, p.motion_mlp.w2.shape[1])))


@dataclass
class _CondTrace:
    e_clip: np.ndarray
    e_arc: np.ndarray
    use_id: bool
    use_motion: bool
    intensity: float


def build_conditions(
    p: DenoiserParams,
    bundle: IdentityBundle,
    text: np.ndarray,
    action: np.ndarray,
    intensity: float,
    cfg: EncoderConfig = EncoderConfig(),
    drop_text: bool = False,
    drop_image: bool = False,
    drop_context: bool = False,
    drop_motion: bool = False,
):
    """Return ``(Conditions, trace)``; the trace is what the backward pass needs."""
    e_clip = np.zeros_like(bundle.e_clip) if drop_context else bundle.e_clip
    if drop_image:
        c_id = np.zeros((1, cfg.d_txt))
    else:
        c_id = encoders.fuse_identity(bundle.e_arc, e_clip, p.fusion)
    if drop_motion:
        e_m = np.zeros((1, p.motion_mlp.w2.shape[1]))
        action = null_text(cfg)
    else:
        e_m = encoders.embed_motion_intensity(intensity, p.motion_mlp).e_m
    if drop_text:
        text = null_text(cfg)
    conds = Conditions(text, c_id, action, e_m)
    return conds, _CondTrace(e_clip, bundle.e_arc, not drop_image, not drop_motion, float(intensity))


# ----------------------------------------------------------------------------
# Denoiser


@dataclass
class _Layer:
    h_in: np.ndarray
    scale: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    a_cache: blocks.DualCache
    h3: np.ndarray
    m_cache: blocks.DualCache
    h4: np.ndarray


@dataclass
class _Cache:
    x: np.ndarray
    t_emb: np.ndarray
    f_emb: np.ndarray
    layers: list[_Layer]
    h: np.ndarray
    d_clean: np.ndarray
    coef: np.ndarray
    sigma: float
    sqrt_ab: float
    denom: float


def _shrink(p: DenoiserParams, t: int, s: NoiseSchedule):
    ab = float(s.alpha_bars[t])
    sigma = math.sqrt(1.0 - ab)
    denom = ab * float(np.exp(p.log_var)) + sigma * sigma
    return float(p.gain) * sigma / denom, sigma, math.sqrt(ab), denom


def predict_noise(z_t: np.ndarray, t: int, conds: Conditions, p: DenoiserParams, s: NoiseSchedule,
                  return_cache: bool = False):
    t = s.check_step(t)
    if z_t.ndim != 4:
        raise ValueError(f"expected [N, H, W, C] latents, got {z_t.shape}")
    n, h, w, c = z_t.shape
    if h * w != p.pos.shape[0] or c != p.w_in.shape[0]:
        raise ValueError(f"latent {z_t.shape} does not match a {p.pos.shape[0]}-token, {p.w_in.shape[0]}-channel model")
    x = z_t.reshape(n, h * w, c)
    t_emb = sinusoidal(t)
    f_emb = sinusoidal(np.arange(n), period=FRAME_PERIOD)
    hid = x @ p.w_in + p.b_in + p.pos[None] + (t_emb @ p.w_time) + (f_emb @ p.w_frame)[:, None, :]
    trace = []
    for lp in p.layers:
        h_in = hid
        scale = 1.0 + t_emb @ lp.film_scale
        h1 = h_in * scale + t_emb @ lp.film_shift
        h2 = h1 + np.matmul(lp.mix, h1)
        a_out, a_cache = blocks.id_adapter_attention(h2, conds.text, conds.c_id, lp.adapter, return_cache=True)
        h3 = h2 + a_out
        m_out, m_cache = blocks.motion_control_attention(h3, conds.action, conds.e_m, lp.motion, return_cache=True)
        h4 = h3 + m_out
        hid = h4 + mlp_forward(lp.ffn, h4)
        trace.append(_Layer(h_in, scale, h1, h2, a_cache, h3, m_cache, h4))
    d_clean = hid @ p.w_out + p.b_out
    coef, sigma, sqrt_ab, denom = _shrink(p, t, s)
    eps = (coef * (x - sqrt_ab * d_clean)).reshape(z_t.shape)
    if not return_cache:
        return eps
    return eps, _Cache(x, t_emb, f_emb, trace, hid, d_clean, np.array(coef), sigma, sqrt_ab, denom)


def predict_noise_backward(cache: _Cache, d_eps: np.ndarray, p: DenoiserParams, want_context: bool = True):
    """Gradients of ``sum(d_eps * eps_hat)``.

    Returns ``(grads, d_cid, d_em)``: a :class:`DenoiserParams`-shaped gradient
    (its fusion and motion-MLP entries are zero) and the condition gradients.
    """
    d_eps = d_eps.reshape(cache.x.shape)
    resid = cache.x - cache.sqrt_ab * cache.d_clean
    d_coef = float(np.sum(d_eps * resid))
    v = float(np.exp(p.log_var))
    ab = cache.sqrt_ab ** 2
    g = {}
    g["gain"] = np.array(d_coef * cache.sigma / cache.denom)
    g["log_var"] = np.array(-d_coef * float(p.gain) * cache.sigma * ab * v / cache.denom ** 2)
    d_clean = -cache.sqrt_ab * float(cache.coef) * d_eps
    g["w_out"] = cache.h.reshape(-1, cache.h.shape[-1]).T @ d_clean.reshape(-1, d_clean.shape[-1])
    g["b_out"] = d_clean.sum(axis=(0, 1))
    dh = d_clean @ p.w_out.T
    d_cid = 0.0
    d_em = 0.0
    for i in range(len(p.layers) - 1, -1, -1):
        lp, tr = p.layers[i], cache.layers[i]
        pre = f"layers.{i}"
        d_ffn_x, ffn_g = mlp_backward(lp.ffn, tr.h4, dh)
        _put(g, f"{pre}.ffn", ffn_g)
        d_h4 = dh + d_ffn_x
        d_h3_blk, _, d_motion, m_g = blocks.motion_control_backward(tr.m_cache, d_h4, lp.motion)
        _put(g, f"{pre}.motion", m_g)
        d_em = d_em + d_motion
        d_h3 = d_h4 + d_h3_blk
        d_h2_blk, _, d_id, a_g = blocks.id_adapter_backward(tr.a_cache, d_h3, lp.adapter)
        _put(g, f"{pre}.adapter", a_g)
        d_cid = d_cid + d_id
        d_h2 = d_h3 + d_h2_blk
        g[f"{pre}.mix"] = _tokens_first(d_h2) @ _tokens_first(tr.h1).T
        d_h1 = d_h2 + np.matmul(lp.mix.T, d_h2)
        g[f"{pre}.film_scale"] = np.outer(cache.t_emb, np.sum(d_h1 * tr.h_in, axis=(0, 1)))
        g[f"{pre}.film_shift"] = np.outer(cache.t_emb, d_h1.sum(axis=(0, 1)))
        dh = d_h1 * tr.scale
    g["w_in"] = cache.x.reshape(-1, cache.x.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
    g["b_in"] = dh.sum(axis=(0, 1))
    g["pos"] = dh.sum(axis=0)
    g["w_time"] = np.outer(cache.t_emb, dh.sum(axis=(0, 1)))
    g["w_frame"] = cache.f_emb.T @ dh.sum(axis=1)
    return g, d_cid, d_em


def _tokens_first(x: np.ndarray) -> np.ndarray:
    # [N, P, W] -> [P, N * W]
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def _put(g: dict, prefix: str, obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            g[f"{prefix}.{f.name}"] = v


def condition_backward(p: DenoiserParams, trace: _CondTrace, d_cid, d_em, g: dict) -> None:
    """Push condition gradients into the fusion and motion-embedding parameters."""
    if trace.use_id and not np.isscalar(d_cid):
        _put(g, "fusion", encoders.fuse_identity_backward(trace.e_arc, trace.e_clip, p.fusion, d_cid))
    if trace.use_motion and not np.isscalar(d_em):
        _put(g, "motion_mlp", encoders.embed_motion_backward(trace.intensity, p.motion_mlp, d_em))


# ----------------------------------------------------------------------------
# Losses through the model


@dataclass
class StepMetrics:
    l_r: float
    l_id: float
    l_total: float


def id_loss_terms(z0_hat: np.ndarray, ref_emb: np.ndarray, decoder: LatentDecoder, cfg: EncoderConfig):
    """L_id of decoded ``z0_hat`` frames against ``ref_emb`` and its gradient wrt ``z0_hat``."""
    n, h, w, c = z0_hat.shape
    jac = identity_jacobian(decoder, cfg, h, w)
    # Same values as decode -> crop -> identity_features, all of which are linear.
    feats = z0_hat.reshape(n, -1) @ jac
    embs = np.concatenate([encoders.normalize_identity(f[None]) for f in feats])
    value, d_emb = losses.id_consistency_loss(ref_emb, embs)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    d_feat = (d_emb - embs * np.sum(d_emb * embs, axis=1, keepdims=True)) / norms
    return value, (d_feat @ jac.T).reshape(z0_hat.shape)


def sample_loss(
    sample: TrainSample,
    p: DenoiserParams,
    s: NoiseSchedule,
    cfg: losses.LossConfig,
    t: int,
    noise: np.ndarray,
    drops: tuple[bool, bool, bool, bool] = (False, False, False, False),
    enc: EncoderConfig = EncoderConfig(),
    decoder: LatentDecoder = LatentDecoder(),
    need_grad: bool = True,
):
    """Composite loss of one sample at a fixed step and noise; optionally with gradients."""
    conds, trace = build_conditions(p, sample.bundle, sample.text, sample.action, sample.intensity, enc, *drops)
    z_t = forward_noise(sample.z0, t, noise, s)
    eps_hat, cache = predict_noise(z_t, t, conds, p, s, return_cache=True)
    l_r, d_eps = losses.region_aware_loss(noise, eps_hat, sample.weights)
    l_id = 0.0
    if cfg.id_loss_active(t) and cfg.beta > 0:
        z0_hat = estimate_z0(z_t, eps_hat, t, s)
        l_id, d_z0 = id_loss_terms(z0_hat, sample.bundle.e_arc, decoder, enc)
        ab = s.alpha_bars[t]
        d_eps = d_eps - cfg.beta * math.sqrt((1.0 - ab) / ab) * d_z0
    metrics = StepMetrics(l_r, l_id, losses.total_loss(l_r, l_id, cfg))
    if not need_grad:
        return metrics, None
    g, d_cid, d_em = predict_noise_backward(cache, d_eps, p)
    condition_backward(p, trace, d_cid, d_em, g)
    return metrics, g


# ----------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 0.01
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, p: DenoiserParams, grads: dict) -> DenoiserParams:
        """Return updated params; decay applies to matrices only."""
        self.step += 1
        c1 = 1.0 - self.b1 ** self.step
        c2 = 1.0 - self.b2 ** self.step

        def one(name, value):
            gr = grads.get(name)
            if gr is None:
                gr = np.zeros_like(value)
            m = self.m.get(name, 0.0) * self.b1 + (1.0 - self.b1) * gr
            v = self.v.get(name, 0.0) * self.b2 + (1.0 - self.b2) * gr * gr
            self.m[name], self.v[name] = m, v
            out = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if value.ndim >= 2:
                out = out - self.lr * self.weight_decay * value
            return out

        return p.map(one)


def train_step(
    batch: TrainSample | Sequence[TrainSample],
    p: DenoiserParams,
    s: NoiseSchedule,
    cfg: losses.LossConfig,
    rng: np.random.Generator,
    opt: AdamW,
    rates: DropoutRates = DropoutRates(),
    enc: EncoderConfig = EncoderConfig(),
    decoder: LatentDecoder = LatentDecoder(),
) -> tuple[DenoiserParams, StepMetrics]:
    """One optimiser update on the mean composite loss of ``batch``.

    Draws, per sample in order: the step, the noise, then the four dropout
    flags (text, identity image, context, motion). Flags fixed on a sample
    override the draw.
    """
    samples = [batch] if isinstance(batch, TrainSample) else list(batch)
    total: dict[str, np.ndarray] = {}
    acc = np.zeros(3)
    for sample in samples:
        t = int(rng.integers(s.T))
        noise = rng.standard_normal(sample.z0.shape)
        draws = rng.random(4) < np.array([rates.text, rates.image, rates.context, rates.motion])
        fixed = (sample.drop_text, sample.drop_image, sample.drop_context, sample.drop_motion)
        drops = tuple(bool(d) if f is None else bool(f) for d, f in zip(draws, fixed))
        metrics, g = sample_loss(sample, p, s, cfg, t, noise, drops, enc, decoder)
        if not np.isfinite(metrics.l_total):
            raise FloatingPointError(f"non-finite loss at optimiser step {opt.step + 1} (t={t})")
        acc += (metrics.l_r, metrics.l_id, metrics.l_total)
        for k, v in g.items():
            total[k] = total[k] + v if k in total else np.array(v, dtype=np.float64)
    scale = 1.0 / len(samples)
    grads = {k: v * scale for k, v in total.items()}
    new_p = opt.update(p, grads)
    acc *= scale
    return new_p, StepMetrics(*map(float, acc))


def evaluation_loss(
    samples: Sequence[TrainSample],
    p: DenoiserParams,
    s: NoiseSchedule,
    cfg: losses.LossConfig,
    steps: Sequence[int],
    seed: int = 0,
    enc: EncoderConfig = EncoderConfig(),
    decoder: LatentDecoder = LatentDecoder(),
) -> StepMetrics:
    """Mean composite loss over a fixed grid of steps and seeded noise, without dropout."""
    rng = np.random.default_rng(seed)
    acc = np.zeros(3)
    count = 0
    for sample in samples:
        for t in steps:
            noise = rng.standard_normal(sample.z0.shape)
            m, _ = sample_loss(sample, p, s, cfg, int(t), noise, enc=enc, decoder=decoder, need_grad=False)
            acc += (m.l_r, m.l_id, m.l_total)
            count += 1
    acc /= count
    return StepMetrics(*map(float, acc))


# ----------------------------------------------------------------------------
# Sampling


@dataclass
class GenRequest:
    bundle: IdentityBundle
    prompt: str
    action: str
    intensity: float
    steps: int = 30
    guidance: float = 8.0
    seed: int = 0
    frames: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.guidance < 0:
            raise ValueError("guidance must be non-negative")
        if not 0.0 <= self.intensity <= encoders.MAX_INTENSITY:
            raise ValueError(f"intensity {self.intensity} outside [0, {encoders.MAX_INTENSITY:g}]")


def ddim_steps(T: int, steps: int) -> np.ndarray:
    if steps > T:
        raise ValueError(f"cannot take {steps} steps on a {T}-step schedule")
    return np.rint(np.linspace(T - 1, 0, steps)).astype(int)


def generate_latent(
    req: GenRequest,
    p: DenoiserParams,
    s: NoiseSchedule,
    enc: EncoderConfig = EncoderConfig(),
    latent_size: Optional[int] = None,
) -> np.ndarray:
    """Deterministic DDIM under classifier-free guidance; returns the final ``z0`` estimate."""
    side = latent_size or int(round(math.sqrt(p.pos.shape[0])))
    shape = (req.frames, side, side, p.w_in.shape[0])
    z = np.random.default_rng(req.seed).standard_normal(shape)
    null = null_conditions(p, enc)
    cond = None
    if req.guidance != 0:
        text = encoders.encode_text(req.prompt, enc.seed, enc.d_txt)
        action = encoders.encode_text(req.action, enc.seed, enc.d_txt)
        cond, _ = build_conditions(p, req.bundle, text, action, req.intensity, enc)
    ts = ddim_steps(s.T, req.steps)
    z0 = z
    for i, t in enumerate(ts):
        eps = predict_noise(z, int(t), null, p, s)
        if cond is not None:
            eps_c = predict_noise(z, int(t), cond, p, s)
            eps = eps + req.guidance * (eps_c - eps)
        z0 = estimate_z0(z, eps, int(t), s)
        if i + 1 < len(ts):
            ab = s.alpha_bars[ts[i + 1]]
            z = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    return z0


def generate(
    req: GenRequest,
    p: DenoiserParams,
    s: NoiseSchedule,
    enc: EncoderConfig = EncoderConfig(),
    decoder: LatentDecoder = LatentDecoder(),
) -> np.ndarray:
    return decoder.decode(generate_latent(req, p, s, enc))
