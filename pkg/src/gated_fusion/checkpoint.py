"""Binary checkpoints of parameters, optimizer moments and generator state.

Layout (little-endian)::

    magic b"GFCK" | version u32 | config length u32 | config JSON (UTF-8)
    tensor count u32
    per tensor: name length u16 | name UTF-8 | dtype u8 (0 f32, 1 f64)
                | rank u8 | dims u32 * rank | values
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, FormatError, StateError
from .numeric.optim import OptimizerState

MAGIC = b"GFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_PARAM = "param/"
_MOMENTS = (("adam.m/", "m"), ("adam.v/", "v"), ("adam.vmax/", "v_max"))
_AUX = "aux/"


@dataclass
class ModelState:
    config: dict
    params: OrderedDict
    optimizer: OptimizerState = None
    epoch: int = 0
    rng_state: dict = None
    extras: dict = field(default_factory=dict)
    aux: OrderedDict = field(default_factory=OrderedDict)


def _encode_tensor(name, array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack(
        "<BB", _CODES[array.dtype], array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[_CODES[array.dtype]]).tobytes()


def encode_checkpoint(state):
    tensors = [(_PARAM + n, v) for n, v in state.params.items()]
    opt_meta = None
    if state.optimizer is not None:
        opt = state.optimizer
        opt_meta = opt.hyperparameters()
        for prefix, attr in _MOMENTS:
            tensors += [(prefix + n, v) for n, v in getattr(opt, attr).items()]
    tensors += [(_AUX + n, v) for n, v in state.aux.items()]
    blob = json.dumps({"config": state.config, "epoch": int(state.epoch),
                       "rng": state.rng_state, "optimizer": opt_meta,
                       "extras": state.extras}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    parts += [_encode_tensor(n, v) for n, v in tensors]
    return b"".join(parts)


def save_checkpoint(state, path):
    """Write ``state`` to ``path`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)
    return path


def decode_checkpoint(data, source="<bytes>"):
    def need(offset, size, what):
        if offset + size > len(data):
            raise FormatError(f"{source}: truncated reading {what} at offset {offset}")

    need(0, 12, "header")
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, expected {VERSION}")
    need(12, blob_len, "config")
    try:
        meta = json.loads(data[12:12 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable config blob ({exc})") from None
    offset = 12 + blob_len
    need(offset, 4, "tensor count")
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tensors = OrderedDict()
    for i in range(count):
        need(offset, 2, f"name of tensor #{i}")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        need(offset, name_len, f"name of tensor #{i}")
        try:
            name = data[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor #{i} has an undecodable name") from None
        offset += name_len
        need(offset, 2, f"header of tensor {name!r}")
        code, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if code not in _DTYPES:
            raise FormatError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        need(offset, 4 * rank, f"dims of tensor {name!r}")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = size * _DTYPES[code].itemsize
        if offset + nbytes > len(data):
            raise FormatError(
                f"{source}: tensor {name!r} declares {nbytes} bytes but only "
                f"{len(data) - offset} remain")
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=size, offset=offset)
        tensors[name] = arr.reshape(dims).astype(_DTYPES[code].newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{source}: {len(data) - offset} trailing bytes")

    params = OrderedDict((n[len(_PARAM):], v) for n, v in tensors.items() if n.startswith(_PARAM))
    aux = OrderedDict((n[len(_AUX):], v) for n, v in tensors.items() if n.startswith(_AUX))
    optimizer = None
    if meta.get("optimizer") is not None:
        optimizer = OptimizerState(**meta["optimizer"])
        for prefix, attr in _MOMENTS:
            getattr(optimizer, attr).update(
                (n[len(prefix):], v) for n, v in tensors.items() if n.startswith(prefix))
    return ModelState(meta["config"], params, optimizer, meta["epoch"], meta["rng"],
                      meta.get("extras") or {}, aux)


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise StateError(f"checkpoint {path} does not exist") from None
    return decode_checkpoint(data, str(path))


def state_dict(network):
    return OrderedDict((n, p.value.copy()) for n, p in network.named_parameters())


def load_parameters(network, params):
    """Copy ``params`` into ``network``; names and shapes must match exactly."""
    own = network.parameters()
    missing = [n for n in own if n not in params]
    unexpected = [n for n in params if n not in own]
    if missing or unexpected:
        raise DimensionError(
            f"checkpoint/network parameter mismatch: missing {missing[:5]}, "
            f"unexpected {unexpected[:5]}")
    for name, p in own.items():
        if params[name].shape != p.value.shape:
            raise DimensionError(
                f"parameter {name!r}: checkpoint shape {params[name].shape}, "
                f"network shape {p.value.shape}")
    for name, p in own.items():
        p.value[...] = params[name]
    return network
