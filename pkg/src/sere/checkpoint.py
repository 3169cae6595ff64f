"""Versioned binary checkpoints: magic "SEREv1", little-endian f64 payloads.

Layout: magic, u32 format version, u64 epoch, two length-prefixed JSON blobs
(RNG state, resolved run config), u64 tensor count, then per tensor a
length-prefixed name, dtype tag (0 = f64), rank, u64 dims, and the raw
payload. Parameters, state buffers (batch-norm running stats), and optimizer
moments all live in the one named table; round trips are bit-exact.

Training streams are derived from (seed, purpose, epoch), so the RNG blob
records the master seed and the counter state needed to resume exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .hierarchy import HierarchySpec, SereModel
from .training import Adam

MAGIC = b"SEREv1"
VERSION = 1
_DTYPE_F64 = 0


def _write_blob(fh, obj):
    raw = json.dumps(obj).encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_blob(fh):
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode("utf-8"))


def _write_tensor(fh, name, arr):
    raw_name = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<H", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.astype("<f8").tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    dtype, rank = struct.unpack("<BB", fh.read(2))
    if dtype != _DTYPE_F64:
        raise ValueError(f"unknown dtype tag {dtype} for tensor {name!r}")
    dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise ValueError(f"truncated payload for tensor {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return name, arr.reshape(dims)


@dataclass
class Checkpoint:
    version: int
    epoch: int
    rng_state: dict
    config: dict
    tensors: dict


def save_checkpoint(path, model, optimizer, epoch, seed, config=None):
    table = {}
    for name, tensor in model.store.params.items():
        table[f"param/{name}"] = tensor.data
    for name, buf in model.store.buffers.items():
        table[f"buffer/{name}"] = buf
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            table[f"opt/m/{name}"] = arr
        for name, arr in optimizer.v.items():
            table[f"opt/v/{name}"] = arr
        table["opt/t"] = np.array([float(optimizer.t)])
    rng_state = {"master_seed": int(seed), "next_epoch": int(epoch)}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", epoch))
        _write_blob(fh, rng_state)
        _write_blob(fh, config if config is not None else {})
        fh.write(struct.pack("<Q", len(table)))
        for name in sorted(table):
            _write_tensor(fh, name, table[name])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (epoch,) = struct.unpack("<Q", fh.read(8))
        rng_state = _read_blob(fh)
        config = _read_blob(fh)
        (count,) = struct.unpack("<Q", fh.read(8))
        tensors = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            tensors[name] = arr
    return Checkpoint(version=version, epoch=epoch, rng_state=rng_state,
                      config=config, tensors=tensors)


def restore_model(ckpt, spec=None):
    """Rebuild the model (and optimizer moments) a checkpoint describes."""
    if spec is None:
        if "spec" not in ckpt.config:
            raise ValueError("checkpoint has no embedded spec; pass one explicitly")
        spec = HierarchySpec(**ckpt.config["spec"])
    model = SereModel(spec, seed=ckpt.rng_state.get("master_seed", 0))
    for name, tensor in model.store.params.items():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if ckpt.tensors[key].shape != tensor.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        tensor.data = ckpt.tensors[key].copy()
    for name, buf in model.store.buffers.items():
        key = f"buffer/{name}"
        if key in ckpt.tensors:
            buf[:] = ckpt.tensors[key]
    optimizer = Adam(model.store.params)
    if "opt/t" in ckpt.tensors:
        optimizer.t = int(ckpt.tensors["opt/t"][0])
        for name in model.store.params:
            optimizer.m[name] = ckpt.tensors[f"opt/m/{name}"].copy()
            optimizer.v[name] = ckpt.tensors[f"opt/v/{name}"].copy()
    return model, optimizer


def spec_as_dict(spec):
    return {
        "data_dim": spec.data_dim,
        "layer_dims": list(spec.layer_dims),
        "wiring": spec.wiring,
        "variational_style": spec.variational_style,
        "decoder": spec.decoder,
        "prior_style": spec.prior_style,
        "activation": spec.activation,
        "evidence_widths": list(spec.evidence_widths),
        "evidence_feature": spec.evidence_feature,
        "latent_widths": list(spec.latent_widths),
        "latent_feature": spec.latent_feature,
        "head_widths": list(spec.head_widths),
        "prior_widths": list(spec.prior_widths),
        "bijector_widths": list(spec.bijector_widths),
        "bijector_activation": spec.bijector_activation,
        "bijector_out_activation": spec.bijector_out_activation,
        "decoder_widths": list(spec.decoder_widths),
        "residual_hidden": spec.residual_hidden,
        "batchnorm": spec.batchnorm,
        "bn_momentum": spec.bn_momentum,
        "maf_flows": spec.maf_flows,
        "maf_mades": spec.maf_mades,
        "maf_hidden": list(spec.maf_hidden),
        "maf_base_feature": spec.maf_base_feature,
    }
