"""Model checkpoint serialization.

Layout: magic "UMCK", format version (u16), a length-prefixed JSON header
(model config echo, tensor index, optional optimizer metadata, provenance),
then float32 little-endian payloads in header order. Values are float64 in
memory, so saving rounds once; load -> save -> load is bitwise stable. A
version or config-echo mismatch is a hard error, never a silent coercion.
"""

import json
import struct

import numpy as np

from . import numcore as nc
from .model import ModelConfig, ModelParams

MAGIC = b"UMCK"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def save_checkpoint(path, params: ModelParams, optimizer: nc.AdamState = None,
                    provenance: dict = None):
    names = params.names()
    header = {
        "format_version": VERSION,
        "model_config": params.config.to_dict(),
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        "provenance": provenance or {},
        "optimizer": None,
    }
    payloads = [np.ascontiguousarray(params[n].data, dtype="<f4").tobytes() for n in names]
    if optimizer is not None:
        opt_names = sorted(set(optimizer.m) & set(names))
        header["optimizer"] = {
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "step": optimizer.step, "tensors": opt_names,
        }
        for n in opt_names:
            payloads.append(np.ascontiguousarray(optimizer.m[n], dtype="<f4").tobytes())
            payloads.append(np.ascontiguousarray(optimizer.v[n], dtype="<f4").tobytes())
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)


def load_checkpoint(path, expected_config: ModelConfig = None):
    """Returns (params, optimizer or None, provenance).

    When expected_config is given the stored config echo must match it
    field for field.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<HI", f.read(6))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != VERSION:
            raise CheckpointError(f"{path}: header format version mismatch")
        config = ModelConfig(**header["model_config"])
        if expected_config is not None and config.to_dict() != expected_config.to_dict():
            raise CheckpointError(
                f"{path}: config echo {config.to_dict()} does not match loading context "
                f"{expected_config.to_dict()}")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            tensors[entry["name"]] = nc.parameter(entry["name"], data.astype(np.float64))
        optimizer = None
        if header.get("optimizer"):
            meta = header["optimizer"]
            optimizer = nc.AdamState(beta1=meta["beta1"], beta2=meta["beta2"],
                                     eps=meta["eps"], step=meta["step"])
            for n in meta["tensors"]:
                shape = tensors[n].data.shape
                count = int(np.prod(shape)) if shape else 1
                optimizer.m[n] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
                optimizer.v[n] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    return ModelParams(config, tensors), optimizer, header.get("provenance", {})
