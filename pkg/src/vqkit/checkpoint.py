"""Binary checkpoint container.

Layout: magic b"VQVK", u32 LE version, u64 LE header length, UTF-8 JSON
header, then the concatenation of all tensors as little-endian float32 in
header order. The header is serialized with sorted keys and compact
separators so identical state always produces identical bytes; writes go
through a temp file and os.replace so readers never see a partial file.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import nets, prior
from .autodiff import DTYPE

MAGIC = b"VQVK"
VERSION = 1
MAX_HEADER = 1 << 26


class CheckpointError(Exception):
    pass


def save_checkpoint(path, header, arrays):
    """Write named float32 arrays with a JSON header, atomically.

    arrays is an ordered list of (name, ndarray); the order is frozen into
    the header and defines payload layout.
    """
    table = []
    blobs = []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        table.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    full = dict(header)
    full["arrays"] = table
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back as (header dict, name -> float32 array)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, "
            f"this build reads version {VERSION}"
        )
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if hlen > MAX_HEADER or 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: corrupt header length {hlen}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    arrays = {}
    pos = 16 + hlen
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: payload truncated at tensor {entry['name']!r}"
            )
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=DTYPE).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, arrays


def _model_arrays(model, spec):
    arrays = [(name, t.data) for name, t in model.named_parameters()]
    if spec.ema:
        arrays.append(("codebook.ema_counts", model.codebook.ema_counts))
        arrays.append(("codebook.ema_sums", model.codebook.ema_sums))
    return arrays


def save_vqvae(path, model, spec, *, step=0, optimizer=None, rng=None, extra=None):
    arrays = _model_arrays(model, spec)
    header = {"kind": "vqvae", "spec": dataclasses.asdict(spec), "step": int(step)}
    if optimizer is not None:
        header["opt"] = {"t": optimizer.t}
        arrays.extend(optimizer.state_arrays())
    if rng is not None:
        header["rng"] = rng.bit_generator.state
    if extra:
        header["extra"] = extra
    save_checkpoint(path, header, arrays)


def save_prior(path, net, pspec, *, step=0, optimizer=None, rng=None, extra=None):
    arrays = [(name, t.data) for name, t in net.named_parameters()]
    header = {"kind": "prior", "spec": dataclasses.asdict(pspec), "step": int(step)}
    if optimizer is not None:
        header["opt"] = {"t": optimizer.t}
        arrays.extend(optimizer.state_arrays())
    if rng is not None:
        header["rng"] = rng.bit_generator.state
    if extra:
        header["extra"] = extra
    save_checkpoint(path, header, arrays)


def _restore_params(params, arrays, path):
    for name, t in params:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        stored = arrays[name]
        if stored.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {stored.shape}, "
                f"model expects {t.data.shape}"
            )
        t.data[...] = stored


def load_vqvae(path):
    """Rebuild a VqVae from a checkpoint; returns (model, spec, header, arrays)."""
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "vqvae":
        raise CheckpointError(
            f"{path}: expected a vqvae checkpoint, found {header.get('kind')!r}"
        )
    try:
        spec = nets.ModelSpec(**header["spec"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad model spec in header: {e}") from e
    model = nets.VqVae.build(spec, np.random.default_rng(0))
    _restore_params(list(model.named_parameters()), arrays, path)
    if spec.ema:
        for key, dest in (("codebook.ema_counts", model.codebook.ema_counts),
                          ("codebook.ema_sums", model.codebook.ema_sums)):
            if key not in arrays:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            dest[...] = arrays[key]
    return model, spec, header, arrays


def load_prior(path):
    """Rebuild a PriorNet from a checkpoint; returns (net, spec, header, arrays)."""
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "prior":
        raise CheckpointError(
            f"{path}: expected a prior checkpoint, found {header.get('kind')!r}"
        )
    try:
        pspec = prior.PriorSpec(**header["spec"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad prior spec in header: {e}") from e
    net = prior.PriorNet(pspec, np.random.default_rng(0))
    _restore_params(list(net.named_parameters()), arrays, path)
    return net, pspec, header, arrays
