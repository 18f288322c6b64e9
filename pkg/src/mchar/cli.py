"""Command-line front end: ``mchar annotate | train | generate | eval | flow``.

Clips and images are NVT1 files (``[N, H, W, C]`` clips, ``[H, W, C]`` images).
Exit status is 0 on success, 1 on a runtime fault and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, diffusion, encoders, flow, losses, nvt1, pipeline
from .config import ConfigError, RunConfig, load_config

EVAL_HELP = """\
Desk-scale proxies only. face_similarity is the mean cosine between the stub
identity embedding of each frame and of the reference image (stands in for
face-recognition similarity); motion_intensity is the measured foreground flow
(stands in for the motion-intensity evaluation); smoothness is the mean absolute
difference between adjacent frames (a crude stand-in for temporal-quality scores).
Video-quality, CLIP image/text and benchmark-suite scores need pretrained models
and are not computed."""


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("MCHAR_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"MCHAR_THREADS={env!r} is not an integer") from None


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _encoder_config(cfg: RunConfig) -> encoders.EncoderConfig:
    return encoders.EncoderConfig(d=cfg.d, d_txt=cfg.d_txt, seed=cfg.encoder_seed)


def _load_image(path: str) -> np.ndarray:
    img = nvt1.load(path)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 3:
        raise ValueError(f"{path}: expected an [H, W, C] image, got {img.shape}")
    return img


def _write_json(path: str, record) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sidecar_base(out_dir: str, entry_id: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_.~" else "_" for ch in entry_id)
    return os.path.join(out_dir, "flow", safe)


# ----------------------------------------------------------------------------


def cmd_annotate(args) -> int:
    cfg = _config(args)
    for p in (args.manifest, args.clip_dir):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    entries, errors = pipeline.ingest_manifest(args.manifest)
    if errors:
        print(errors.format(), file=sys.stderr)
        return 1
    th = pipeline.Thresholds(q_min=cfg.q_min, o_max=cfg.o_max)
    passed, report = pipeline.filter_clips(entries, th)
    threads = _threads(args)
    os.makedirs(os.path.join(out_dir, "flow"), exist_ok=True)
    annotated = []
    for e in passed:
        clip = nvt1.load(os.path.join(args.clip_dir, e.clip_path))
        annotated.append(pipeline.annotate_intensity(e, clip, _sidecar_base(out_dir, e.id), threads=threads))
    final = pipeline.resample_by_intensity(annotated, cfg.bin_width, cfg.seed) if annotated else []
    pipeline.write_manifest(args.out, final)
    _write_json(os.path.join(out_dir, "filter_report.json"), report.to_dict())
    print(report.format())
    print(f"annotated {len(annotated)}, written {len(final)}")
    return 0


def _training_samples(cfg: RunConfig, entries, clip_dir: str, p, enc, decoder, threads: int):
    samples = []
    for e in entries:
        clip = nvt1.load(os.path.join(clip_dir, e.clip_path))
        if clip.ndim != 4:
            raise ValueError(f"{e.clip_path}: expected an [N, H, W, C] clip")
        if e.motion_intensity is None:
            raise ValueError(f"entry {e.id!r} is not annotated")
        z0 = decoder.encode(clip)
        if z0.shape[1:3] != (cfg.latent_size, cfg.latent_size):
            raise ValueError(f"{e.clip_path}: latent grid {z0.shape[1:3]} is not {cfg.latent_size}x{cfg.latent_size}")
        _, ann = flow.video_motion_intensity(clip, threads=threads)
        weights = np.stack([flow.downsample_weight_mask(w, *z0.shape[1:3]) for w in ann.weight_masks])
        bundle = encoders.build_identity_bundle(clip[0], p.fusion, enc, bbox=e.face_bbox)
        samples.append(diffusion.TrainSample(
            z0=z0,
            bundle=bundle,
            text=encoders.encode_text(e.caption, enc.seed, enc.d_txt),
            action=encoders.encode_text(e.action_phrase, enc.seed, enc.d_txt),
            intensity=float(e.motion_intensity),
            weights=weights,
        ))
    return samples


def init_params(cfg: RunConfig) -> diffusion.DenoiserParams:
    return diffusion.DenoiserParams.init(
        np.random.default_rng(cfg.seed),
        tokens=cfg.latent_size ** 2,
        channels=cfg.channels,
        width=cfg.width,
        hidden=cfg.hidden,
        layers=cfg.layers,
        d=cfg.d,
        d_txt=cfg.d_txt,
        d_att=cfg.d_att,
        lam=cfg.lam,
        alpha=cfg.alpha,
    )


def train_loop(cfg: RunConfig, samples, p, metrics_path: Optional[str] = None, enc=None, decoder=None):
    """Run ``cfg.train_steps`` updates; returns the final params and per-step metrics."""
    enc = enc or encoders.EncoderConfig(d=cfg.d, d_txt=cfg.d_txt, seed=cfg.encoder_seed)
    decoder = decoder or diffusion.LatentDecoder(seed=cfg.encoder_seed, latent_channels=cfg.channels)
    s = diffusion.NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    lcfg = losses.LossConfig(beta=cfg.beta, id_loss_step_gate=cfg.id_loss_gate)
    rates = diffusion.DropoutRates(cfg.text_dropout, cfg.image_dropout, cfg.context_dropout, cfg.motion_dropout)
    opt = diffusion.AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    fh = open(metrics_path, "w", encoding="utf-8", newline="") if metrics_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(["step", "l_r", "l_id", "l_total"])
        n = len(samples)
        for step in range(cfg.train_steps):
            batch = [samples[(step * cfg.batch + j) % n] for j in range(cfg.batch)]
            p, m = diffusion.train_step(batch, p, s, lcfg, rng, opt, rates, enc, decoder)
            history.append(m)
            if writer:
                writer.writerow([step + 1, repr(m.l_r), repr(m.l_id), repr(m.l_total)])
    finally:
        if fh:
            fh.close()
    return p, history


def cmd_train(args) -> int:
    cfg = _config(args)
    if not os.path.exists(args.manifest):
        raise FileNotFoundError(args.manifest)
    clip_dir = args.clip_dir or os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out_dir, exist_ok=True)
    enc = _encoder_config(cfg)
    decoder = diffusion.LatentDecoder(seed=cfg.encoder_seed, latent_channels=cfg.channels)
    entries, errors = pipeline.ingest_manifest(args.manifest)
    if errors:
        print(errors.format(), file=sys.stderr)
        return 1
    p = init_params(cfg)
    samples = _training_samples(cfg, entries, clip_dir, p, enc, decoder, _threads(args))
    if cfg.train_steps > 0 and not samples:
        raise ValueError("manifest has no entries to train on")
    try:
        p, _ = train_loop(cfg, samples, p, os.path.join(args.out_dir, "metrics.csv"), enc, decoder)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    checkpoint.save_checkpoint(os.path.join(args.out_dir, "checkpoint"), p, cfg)
    print(f"trained {cfg.train_steps} steps on {len(samples)} clips")
    return 0


def cmd_generate(args) -> int:
    if not 0.0 <= args.intensity <= encoders.MAX_INTENSITY:
        raise UsageError(f"--intensity must lie in [0, {encoders.MAX_INTENSITY:g}], got {args.intensity:g}")
    p, cfg = checkpoint.load_checkpoint(args.checkpoint)
    cfg = cfg or RunConfig()
    enc = _encoder_config(cfg)
    decoder = diffusion.LatentDecoder(seed=cfg.encoder_seed, latent_channels=cfg.channels)
    s = diffusion.NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    ref = _load_image(args.ref_image)
    bundle = encoders.build_identity_bundle(ref, p.fusion, enc)
    req = diffusion.GenRequest(
        bundle=bundle,
        prompt=args.prompt,
        action=args.action,
        intensity=args.intensity,
        steps=args.steps if args.steps is not None else cfg.gen_steps,
        guidance=args.guidance if args.guidance is not None else cfg.guidance,
        seed=args.seed,
        frames=args.frames if args.frames is not None else cfg.frames,
    )
    video = diffusion.generate(req, p, s, enc, decoder)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    nvt1.save(args.out, video)
    record = {
        "checkpoint": args.checkpoint, "ref_image": args.ref_image, "prompt": args.prompt, "action": args.action,
        "intensity": args.intensity, "seed": args.seed, "steps": req.steps, "guidance": req.guidance,
        "frames": req.frames, "shape": list(video.shape),
    }
    _write_json(os.path.splitext(args.out)[0] + ".json", record)
    print(f"wrote {args.out} {video.shape}")
    return 0


def evaluate_clip(clip: np.ndarray, ref: np.ndarray, enc: encoders.EncoderConfig, threads: int = 1) -> dict:
    """Proxy metrics of ``clip`` against reference image ``ref`` (see the eval help text)."""
    clip = np.asarray(clip, dtype=np.float64)
    ref_emb = encoders.face_embedding(ref, None, enc)[0]
    sims = [float(encoders.face_embedding(f, None, enc)[0] @ ref_emb) for f in clip]
    if clip.shape[0] >= 2:
        intensity, ann = flow.video_motion_intensity(clip, threads=threads)
        fg = [float(x) for x in ann.fg_means]
        diffs = [float(np.mean(np.abs(clip[i + 1] - clip[i]))) for i in range(clip.shape[0] - 1)]
    else:
        intensity, fg, diffs = 0.0, [], []
    return {
        "face_similarity": float(np.mean(sims)),
        "motion_intensity": float(intensity),
        "smoothness": float(np.mean(diffs)) if diffs else 0.0,
        "per_frame": {"face_similarity": sims, "foreground_flow": fg, "abs_difference": diffs},
    }


def cmd_eval(args) -> int:
    cfg = RunConfig()
    if args.checkpoint:
        _, stored = checkpoint.load_checkpoint(args.checkpoint)
        cfg = stored or cfg
    clip = nvt1.load(args.clip)
    if clip.ndim != 4:
        raise ValueError(f"{args.clip}: expected an [N, H, W, C] clip")
    record = evaluate_clip(clip, _load_image(args.ref_image), _encoder_config(cfg), _threads(args))
    text = json.dumps(record, indent=1, sort_keys=True)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        _write_json(args.out, record)
    print(text)
    return 0


def cmd_flow(args) -> int:
    a, b = _load_image(args.frame_a), _load_image(args.frame_b)
    f = flow.estimate_flow(a, b)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    nvt1.save(args.out, f.stacked())
    mag = f.magnitude
    print(json.dumps({"shape": list(mag.shape), "mean_magnitude": float(mag.mean()), "max_magnitude": float(mag.max())}))
    return 0


# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mchar", description=__doc__, allow_abbrev=False,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for flow estimation (default: $MCHAR_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("annotate", help="filter, measure and resample a manifest", allow_abbrev=False)
    a.add_argument("--manifest", required=True)
    a.add_argument("--clip-dir", required=True)
    a.add_argument("--out", required=True, help="output manifest; report and flow sidecars go next to it")
    a.add_argument("--config")
    a.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="train the toy denoiser on an annotated manifest", allow_abbrev=False)
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--clip-dir", help="directory holding the clips (default: the manifest's directory)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample a video from a checkpoint", allow_abbrev=False)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--ref-image", required=True)
    g.add_argument("--prompt", default="")
    g.add_argument("--action", default="")
    g.add_argument("--intensity", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int)
    g.add_argument("--guidance", type=float)
    g.add_argument("--frames", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="proxy metrics of a generated clip", description=EVAL_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter, allow_abbrev=False)
    e.add_argument("--checkpoint")
    e.add_argument("--ref-image", required=True)
    e.add_argument("--clip", required=True)
    e.add_argument("--out")
    e.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flow", help="dense flow between two frames", allow_abbrev=False)
    f.add_argument("--frame-a", required=True)
    f.add_argument("--frame-b", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_flow)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ConfigError, pipeline.ManifestError, nvt1.NVT1Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
