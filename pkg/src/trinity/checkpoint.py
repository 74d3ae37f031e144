"""Checkpoint file format.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"TRNCKPT\\x00"
    offset 8   u32       schema_version
    offset 12  u64       header length H
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          array blob

The header holds the model config, its hash, lineage, Adam scalars, the
normaliser epsilon, bin metadata and a section table. Each section entry is
``{"name", "dtype", "shape", "offset", "nbytes"}`` with ``offset`` relative
to the start of the blob. Section names: ``param/<name>``, ``adam_m/<name>``,
``adam_v/<name>``, ``norm/mean``, ``norm/std``, ``bins/padded``,
``bins/lengths``. Arrays are stored C-contiguous as ``<f8`` or ``<i8``, so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dense2sparse import BinBoundaries, NormStats
from .errors import ContractError
from .model import Checkpoint, model_config_from_dict
from .nn import AdamState

MAGIC = b"TRNCKPT\x00"
SCHEMA_VERSION = 1


def _sections(ckpt: Checkpoint):
    yield from ((f"param/{k}", v) for k, v in ckpt.params.items())
    yield from ((f"adam_m/{k}", v) for k, v in ckpt.adam.m.items())
    yield from ((f"adam_v/{k}", v) for k, v in ckpt.adam.v.items())
    yield "norm/mean", ckpt.norm.mean
    yield "norm/std", ckpt.norm.std
    if ckpt.bins is not None:
        padded, lens = ckpt.bins.padded()
        yield "bins/padded", padded
        yield "bins/lengths", lens


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in _sections(ckpt):
        arr = np.asarray(arr)
        dtype = "<i8" if arr.dtype.kind in "iu" else "<f8"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config_hash,
        "lineage": ckpt.lineage,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "t": ckpt.adam.t},
        "norm_epsilon": ckpt.norm.epsilon,
        "bins": None if ckpt.bins is None else {"n_buckets": ckpt.bins.n_buckets,
                                                "reserve_zero": ckpt.bins.reserve_zero},
        "sections": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", SCHEMA_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != SCHEMA_VERSION:
        raise ContractError(f"unsupported checkpoint schema_version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for s in header["sections"]:
        start = base + s["offset"]
        arrays[s["name"]] = np.frombuffer(blob[start:start + s["nbytes"]], dtype=s["dtype"]) \
            .reshape(s["shape"]).astype(np.int64 if s["dtype"] == "<i8" else np.float64)
    cfg = model_config_from_dict(header["config"])
    if cfg.hash() != header["config_hash"]:
        raise ContractError("checkpoint config hash does not match its config")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    a = header["adam"]
    adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"],
                     group("adam_m/"), group("adam_v/"))
    norm = NormStats(arrays["norm/mean"], arrays["norm/std"], header["norm_epsilon"])
    bins = None
    if header["bins"] is not None:
        bins = BinBoundaries.from_padded(arrays["bins/padded"], arrays["bins/lengths"],
                                         header["bins"]["n_buckets"], header["bins"]["reserve_zero"])
    return Checkpoint(cfg, group("param/"), norm, bins, adam, header["lineage"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
