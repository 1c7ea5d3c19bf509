"""GCDLAB-CKPT-1 checkpoint files.

Layout: ASCII magic line "GCDLAB-CKPT-1\\n", an 8-byte little-endian header
length, a JSON header {"meta": ..., "tensors": [{"name", "shape"}, ...]},
then the raw tensor data: little-endian float64 buffers concatenated in
header order. Tensor names are sorted, metadata keys canonicalized, so a
given model always serializes to identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import CascadeConfig, DiffusionCascade
from .downstream import SegmenterConfig, SegmenterParams
from .embed import ByolEncoderParams, EncoderSpec, FeatureConfig
from .errors import ShapeError
from .graphcond import EncoderConfig, GraphEncoderParams

MAGIC = b"GCDLAB-CKPT-1\n"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(tensors)
    header = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ShapeError(f"{path}: not a GCDLAB-CKPT-1 file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors = {}
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * 8)
            tensors[rec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return tensors, header["meta"]


# -- model bundles ----------------------------------------------------------


def _cfg_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def save_byol(path: str | Path, params: ByolEncoderParams) -> None:
    tensors = {}
    for k, v in params.online.items():
        tensors[f"online.{k}"] = v
    for k, v in params.target.items():
        tensors[f"target.{k}"] = v
    meta = {
        "kind": "byol",
        "tau": params.tau,
        "spec": _cfg_dict(params.spec),
        "proj_dims": list(params.proj_dims),
        "pred_dims": list(params.pred_dims),
    }
    save_checkpoint(path, tensors, meta)


def load_byol(path: str | Path) -> ByolEncoderParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "byol":
        raise ShapeError(f"{path}: not an embedder checkpoint")
    spec = EncoderSpec(
        image_size=meta["spec"]["image_size"],
        channels=tuple(meta["spec"]["channels"]),
        d_out=meta["spec"]["d_out"],
    )
    online = {k[len("online."):]: v for k, v in tensors.items() if k.startswith("online.")}
    target = {k[len("target."):]: v for k, v in tensors.items() if k.startswith("target.")}
    return ByolEncoderParams(
        online=online,
        target=target,
        tau=meta["tau"],
        spec=spec,
        proj_dims=tuple(meta["proj_dims"]),
        pred_dims=tuple(meta["pred_dims"]),
    )


def cascade_config_from_meta(d: dict) -> CascadeConfig:
    d = dict(d)
    for key in ("resolutions", "hidden", "blocks", "train_steps", "batch"):
        d[key] = tuple(d[key])
    return CascadeConfig(**d)


def save_cascade(path: str | Path, cascade: DiffusionCascade) -> None:
    tensors: dict[str, np.ndarray] = {}
    tensors.update(cascade.encoder.params)
    for stage in cascade.stage_params:
        tensors.update(stage)
    meta = {
        "kind": "cascade",
        "config": _cfg_dict(cascade.config),
        "encoder_config": _cfg_dict(cascade.encoder_config),
        "feature_config": _cfg_dict(cascade.feature_config),
        "trained": list(cascade.trained),
    }
    save_checkpoint(path, tensors, meta)


def load_cascade(path: str | Path) -> DiffusionCascade:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "cascade":
        raise ShapeError(f"{path}: not a cascade checkpoint")
    config = cascade_config_from_meta(meta["config"])
    enc_cfg = EncoderConfig(**meta["encoder_config"])
    feat_cfg = FeatureConfig(**meta["feature_config"])
    encoder = GraphEncoderParams(
        params={k: v for k, v in tensors.items() if k.startswith("genc.")},
        config=enc_cfg,
    )
    stages = []
    for i in range(len(config.resolutions)):
        stages.append({k: v for k, v in tensors.items() if k.startswith(f"stage{i}.")})
    return DiffusionCascade(
        config=config,
        encoder_config=enc_cfg,
        feature_config=feat_cfg,
        encoder=encoder,
        stage_params=stages,
        trained=[bool(t) for t in meta["trained"]],
    )


def save_segmenter(path: str | Path, model: SegmenterParams) -> None:
    save_checkpoint(
        path, model.params, {"kind": "segmenter", "config": _cfg_dict(model.config)}
    )


def load_segmenter(path: str | Path) -> SegmenterParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "segmenter":
        raise ShapeError(f"{path}: not a segmenter checkpoint")
    return SegmenterParams(params=tensors, config=SegmenterConfig(**meta["config"]))
