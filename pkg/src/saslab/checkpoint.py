"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SASCKPT1"                      8-byte magic
    uint64 header_len
    header (UTF-8, header_len bytes):
        [config]
        key=value                    canonical, key-sorted
        [meta]
        key=value                    key-sorted
        [arrays]
        name<TAB>d0,d1,...<TAB>offset   offset in bytes from payload start
    payload: raw float32 little-endian arrays, C order, in manifest order

Arrays are stored exactly as float32, so a save/load round trip is bit-exact.
"""

import os
import struct

import numpy as np

from . import config as cfgmod
from .attention import is_expansion_param
from .errors import SasLabError
from .model import param_shapes
from .numcore import Tensor

MAGIC = b"SASCKPT1"
_F32 = np.dtype("<f4")


class CheckpointError(SasLabError):
    pass


def _header(config, meta, manifest):
    lines = ["[config]"]
    lines += [f"{k}={config[k]}" for k in sorted(config)]
    lines.append("[meta]")
    lines += [f"{k}={meta[k]}" for k in sorted(meta)]
    lines.append("[arrays]")
    for name, shape, offset in manifest:
        lines.append(f"{name}\t{','.join(str(d) for d in shape)}\t{offset}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save(path, arrays, config=None, meta=None):
    """Write ``{name: array}`` plus flat string config/meta to ``path`` atomically."""
    config = {k: str(v) for k, v in (config or {}).items()}
    meta = {k: str(v) for k, v in (meta or {}).items()}
    manifest, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if any(c in name for c in "\t\n"):
            raise CheckpointError(f"invalid array name {name!r}")
        data = np.ascontiguousarray(np.asarray(arr), dtype=_F32)
        manifest.append((name, data.shape, offset))
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = _header(config, meta, manifest)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load(path):
    """Return ``(arrays, config, meta)``; arrays are float32 numpy arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = raw[16:16 + hlen].decode("utf-8")
    payload = memoryview(raw)[16 + hlen:]

    config, meta, arrays = {}, {}, {}
    section = None
    for line in header.split("\n"):
        if not line:
            continue
        if line in ("[config]", "[meta]", "[arrays]"):
            section = line
            continue
        if section == "[arrays]":
            name, shape_s, off_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            off = int(off_s)
            n = int(np.prod(shape)) if shape else 1
            if off + 4 * n > len(payload):
                raise CheckpointError(f"{path}: array {name} runs past end of file")
            arrays[name] = np.frombuffer(payload, dtype=_F32, count=n, offset=off).reshape(shape).astype(np.float32)
        else:
            key, value = line.split("=", 1)
            (config if section == "[config]" else meta)[key] = value
    return arrays, config, meta


def save_model(path, params, model_cfg, train_cfg=None, meta=None, extra_arrays=None):
    arrays = {k: v.data for k, v in params.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    save(path, arrays, cfgmod.flatten(model_cfg, train_cfg), meta)


def load_model(path):
    """Return ``(params, model_cfg, meta, extra_arrays)``; params are trainable Tensors."""
    arrays, config, meta = load(path)
    model_cfg = cfgmod.model_from_flat(config)
    frozen = model_cfg.attention.freeze_expansion

    params = {}
    for name, shape in param_shapes(model_cfg).items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        trainable = not (frozen and is_expansion_param(name))
        params[name] = Tensor(arrays.pop(name), requires_grad=trainable, name=name)
    return params, model_cfg, meta, arrays
