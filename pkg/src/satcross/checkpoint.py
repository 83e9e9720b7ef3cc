"""Versioned binary checkpoint container.

Layout: magic line, 8-byte little-endian header length, JSON header (format
version, encoder config, tensor directory with shapes/offsets), then the raw
row-major float64 tensor data. Round-trips bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .encoders import DualEncoder, EncoderConfig
from .errors import IncompatibleCheckpoint

MAGIC = b"SATCROSS-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(model: DualEncoder, path) -> None:
    tensors = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    directory = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        blob = arr.tobytes()
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "numel": int(arr.size),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": directory,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return (EncoderConfig, {name: float64 ndarray})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise IncompatibleCheckpoint(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise IncompatibleCheckpoint(
                f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
        data = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        end = start + entry["numel"] * 8
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    config = EncoderConfig(**header["config"])
    return config, tensors


def model_from_checkpoint(path) -> DualEncoder:
    config, tensors = load_checkpoint(path)
    model = DualEncoder(config)
    state = model.state_dict()
    if set(state) != set(tensors):
        raise IncompatibleCheckpoint(f"{path}: parameter names do not match the config")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != tuple(arr.shape):
            raise IncompatibleCheckpoint(
                f"{path}: tensor '{name}' shape {arr.shape} != {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model


def checkpoint_id(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:12]
