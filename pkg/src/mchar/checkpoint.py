"""Checkpoint directories: one NVT1 file per tensor plus a plain-text index."""
from __future__ import annotations

import os
from typing import Optional

import numpy as np

from . import nvt1
from .config import RunConfig, parse_config
from .diffusion import DenoiserParams

INDEX = "index.txt"
SCALARS = "scalars.txt"
CONFIG = "config.txt"


def save_checkpoint(path: str | os.PathLike, p: DenoiserParams, cfg: Optional[RunConfig] = None) -> None:
    """Write every trainable tensor; the index lists ``name<TAB>file<TAB>shape`` per line."""
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    lines = []
    for name, arr in sorted(p.flatten().items()):
        fname = name + ".nvt1"
        nvt1.save(os.path.join(path, fname), np.asarray(arr, dtype=np.float64))
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name}\t{fname}\t{shape}\n")
    with open(os.path.join(path, INDEX), "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    with open(os.path.join(path, SCALARS), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{v!r}\n" for k, v in sorted(p.scalars().items()))
    if cfg is not None:
        with open(os.path.join(path, CONFIG), "w", encoding="utf-8") as fh:
            fh.write(cfg.dumps())


def load_checkpoint(path: str | os.PathLike) -> tuple[DenoiserParams, Optional[RunConfig]]:
    path = os.fspath(path)
    flat = {}
    with open(os.path.join(path, INDEX), encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{INDEX}:{n}: expected three tab-separated fields")
            name, fname, shape = parts
            arr = nvt1.load(os.path.join(path, fname))
            want = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            if arr.shape != want:
                raise ValueError(f"{fname}: shape {arr.shape} does not match index {want}")
            flat[name] = arr
    scalars = {}
    with open(os.path.join(path, SCALARS), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                k, v = line.rstrip("\n").split("\t")
                scalars[k] = float(v)
    cfg = None
    cfg_path = os.path.join(path, CONFIG)
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    return DenoiserParams.from_flat(flat, scalars), cfg
