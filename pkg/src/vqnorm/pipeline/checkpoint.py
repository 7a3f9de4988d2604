"""Versioned named-blob container for model checkpoints.

Layout (little-endian)::

    magic "VQNC" | u16 version | u16 reserved | u32 header length | u64 payload length
    header: UTF-8 JSON (kind, config echo, hashes, blob index)
    payload: concatenated raw blobs
    sha256 of everything above (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .. import ndgrad as nd
from ..artransformer import ARTransformer, TransformerConfig
from ..baselines import BrainAgeConfig, BrainAgeModel
from ..errors import ConfigError, IntegrityError
from ..vqvae import VQVAE, VqVaeConfig

MAGIC = b"VQNC"
VERSION = 1
_PREFIX = struct.Struct("<4sHHIQ")


def save_blobs(path, kind: str, blobs: Dict[str, np.ndarray], meta: dict) -> str:
    """Write a checkpoint; returns the hex sha256 of the file body."""
    index, chunks, offset = [], [], 0
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        index.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "blobs": index}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, 0, len(header), offset) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return digest.hex()


def load_blobs(path, expect_kind: Optional[str] = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read and verify a checkpoint; returns (meta, blobs)."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + 32:
        raise IntegrityError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    magic, version, _, hlen, plen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise IntegrityError(f"{path}: checkpoint format version {version} is not supported by this "
                             f"release (expects {VERSION}); re-export it with a matching release")
    expected = _PREFIX.size + hlen + plen + 32
    if len(data) != expected:
        raise IntegrityError(f"{path}: length {len(data)} does not match header ({expected} bytes); "
                             "file is truncated or has trailing data")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, checkpoint is corrupted")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ConfigError(f"{path}: expected a {expect_kind} checkpoint, found {header['kind']}")
    payload = body[_PREFIX.size + hlen:]
    blobs = {}
    for b in header["blobs"]:
        raw = payload[b["offset"]:b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(b["dtype"])).reshape(b["shape"]).copy()
        blobs[b["name"]] = arr
    return header["meta"], blobs


def _assign(params: Dict[str, nd.Tensor], blobs: Dict[str, np.ndarray], path) -> None:
    missing = sorted(set(params) - set(blobs))
    extra = sorted(set(blobs) - set(params) - {"usage"})
    if missing or extra:
        raise ConfigError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = blobs[name]
        if arr.shape != p.data.shape:
            raise ConfigError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.data.shape}")
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        arr.flags.writeable = False
        p.data = arr


def save_vqvae(path, model: VQVAE, extra: Optional[dict] = None) -> str:
    blobs = {n: p.data for n, p in model.params.items()}
    blobs["usage"] = np.asarray(model.usage, dtype=np.int64)
    meta = {"config": asdict(model.config), "config_hash": model.config.hash(),
            "fingerprint": model.fingerprint(), **(extra or {})}
    return save_blobs(path, "vqvae", blobs, meta)


def load_vqvae(path) -> Tuple[VQVAE, dict]:
    meta, blobs = load_blobs(path, "vqvae")
    cfg = VqVaeConfig(**meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise ConfigError(f"{path}: embedded config hash does not match its config echo")
    model = VQVAE(cfg)
    _assign(model.params, blobs, path)
    model.usage = blobs.get("usage", np.zeros(cfg.codebook_size, dtype=np.int64))
    if model.fingerprint() != meta["fingerprint"]:
        raise IntegrityError(f"{path}: parameter fingerprint mismatch")
    return model, meta


def save_transformer(path, model: ARTransformer, extra: Optional[dict] = None) -> str:
    blobs = {n: p.data for n, p in model.params.items()}
    meta = {"config": asdict(model.config), "config_hash": model.config.hash(),
            "paired_vqvae": model.paired_vqvae, "fingerprint": model.fingerprint(), **(extra or {})}
    return save_blobs(path, "transformer", blobs, meta)


def load_transformer(path, vqvae: Optional[VQVAE] = None) -> Tuple[ARTransformer, dict]:
    """Load a transformer; with ``vqvae`` given, refuse a checkpoint trained on another VQ-VAE."""
    meta, blobs = load_blobs(path, "transformer")
    cfg = TransformerConfig(**meta["config"])
    model = ARTransformer(cfg)
    _assign(model.params, blobs, path)
    model.paired_vqvae = meta.get("paired_vqvae")
    if vqvae is not None and model.paired_vqvae != vqvae.fingerprint():
        raise ConfigError(f"{path}: transformer was trained on VQ-VAE {model.paired_vqvae}, "
                          f"but the current VQ-VAE is {vqvae.fingerprint()}; retrain the transformer")
    return model, meta


def save_brain_age(path, model: BrainAgeModel) -> str:
    blobs = {n: p.data for n, p in model.params.items()}
    meta = {"config": asdict(model.config), "age_mean": model.age_mean, "age_sd": model.age_sd,
            "history": model.history}
    return save_blobs(path, "brainage", blobs, meta)


def load_brain_age(path) -> BrainAgeModel:
    meta, blobs = load_blobs(path, "brainage")
    cfg_dict = dict(meta["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    cfg = BrainAgeConfig(**cfg_dict)
    model = BrainAgeModel.init(cfg, 0, meta["age_mean"], meta["age_sd"])
    _assign(model.params, blobs, path)
    model.history = meta["history"]
    return model
