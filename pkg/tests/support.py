"""Shared builders for the toy-model tests."""
import numpy as np

from mchar import diffusion as D
from mchar import encoders as E
from mchar import losses, synthetic

TINY_ENC = E.EncoderConfig(d=8, d_txt=8)


def tiny_params(seed=0, layers=2, lam=1.0, alpha=1.0, perturb=0.0):
    """N=2, 4x4x4 latents, width 8. ``perturb`` adds noise to zero-initialised arrays."""
    rng = np.random.default_rng(seed)
    p = D.DenoiserParams.init(rng, tokens=16, channels=4, width=8, hidden=16, layers=layers,
                              d=8, d_txt=8, d_att=4, lam=lam, alpha=alpha)
    if perturb:
        p = p.map(lambda k, v: v + perturb * rng.standard_normal(v.shape))
    return p


def tiny_sample(p, seed=0, intensity=7.0, enc=TINY_ENC):
    rng = np.random.default_rng(seed + 10)
    z0 = rng.standard_normal((2, 4, 4, 4))
    ref = D.LatentDecoder().decode(z0[:1])[0]
    bundle = E.build_identity_bundle(ref, p.fusion, enc)
    return D.TrainSample(
        z0=z0, bundle=bundle,
        text=E.encode_text("a person smiling", enc.seed, enc.d_txt),
        action=E.encode_text("smiling", enc.seed, enc.d_txt),
        intensity=intensity, weights=rng.uniform(1.0, 1.5, (2, 4, 4)),
    )


def orbit_samples(p, enc=E.EncoderConfig(), decoder=D.LatentDecoder()):
    """Three latent clips whose sprite speeds 0, 0.25, 0.5 are labelled 0, 10, 20."""
    out = []
    for speed, m in [(0.0, 0.0), (0.25, 10.0), (0.5, 20.0)]:
        z0 = synthetic.orbit_latent_clip(speed)
        bundle = E.build_identity_bundle(decoder.decode(z0[:1])[0], p.fusion, enc)
        out.append(D.TrainSample(
            z0=z0, bundle=bundle,
            text=E.encode_text("a person smiling", enc.seed, enc.d_txt),
            action=E.encode_text("smiling", enc.seed, enc.d_txt),
            intensity=m, weights=np.ones(z0.shape[:-1]),
        ))
    return out


def param_subset(p, per_tensor=2, seed=0):
    """A few (name, flat index) pairs from every trainable tensor."""
    rng = np.random.default_rng(seed)
    picks = []
    for name, arr in sorted(p.flatten().items()):
        k = min(per_tensor, arr.size)
        for i in rng.choice(arr.size, size=k, replace=False):
            picks.append((name, int(i)))
    return picks


def fd_check(sample, p, s, cfg, t, noise, drops, picks, eps=1e-5, enc=TINY_ENC):
    """Analytic vs central-difference gradient on the picked entries; returns relative error."""
    _, g = D.sample_loss(sample, p, s, cfg, t, noise, drops, enc)
    analytic, numeric = [], []
    flat = p.flatten()
    for name, i in picks:
        arr = flat[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + eps
        fp = D.sample_loss(sample, p, s, cfg, t, noise, drops, enc, need_grad=False)[0].l_total
        arr[i] = orig - eps
        fm = D.sample_loss(sample, p, s, cfg, t, noise, drops, enc, need_grad=False)[0].l_total
        arr[i] = orig
        numeric.append((fp - fm) / (2 * eps))
        gv = g.get(name)
        analytic.append(0.0 if gv is None else float(np.asarray(gv).reshape(-1)[i]))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


CFG_LOSS = losses.LossConfig()
