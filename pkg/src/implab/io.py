"""Binary checkpoint and mask files.

Checkpoint (``PLCK``)::

    b"PLCK" | u32 version | u64 metadata length | UTF-8 JSON | f64 params | f64 momentum

Mask (``PLMK``)::

    b"PLMK" | u32 version | u64 metadata length | UTF-8 JSON | packed bits (little-endian bit order)

All integers and reals are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from implab.exceptions import FormatError
from implab.masks import Mask
from implab.model import ModelSpec, Network, ParamVector
from implab.train import Checkpoint

CHECKPOINT_MAGIC = b"PLCK"
MASK_MAGIC = b"PLMK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def _write(path, magic: bytes, meta: dict, payload: bytes) -> None:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: file too short")
    got, version, n = _HEAD.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    end = _HEAD.size + n
    if len(raw) < end:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[_HEAD.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata is not valid JSON") from exc
    return meta, raw[end:]


def save_checkpoint(path, ckpt: Checkpoint, spec: ModelSpec | None = None, extra: dict | None = None) -> None:
    meta = dict(ckpt.meta)
    meta.update(extra or {})
    meta.update(step=int(ckpt.step), data_seed=int(ckpt.data_seed), n_params=int(ckpt.params.size))
    if spec is not None:
        meta["spec"] = spec.to_dict()
    payload = ckpt.params.values.astype("<f8").tobytes() + ckpt.momentum.astype("<f8").tobytes()
    _write(path, CHECKPOINT_MAGIC, meta, payload)


def load_checkpoint(path, net: Network | None = None) -> tuple[Checkpoint, dict]:
    """Read a checkpoint; the network is rebuilt from the stored spec unless given."""
    meta, payload = _read(path, CHECKPOINT_MAGIC)
    n = meta.get("n_params")
    if not isinstance(n, int) or len(payload) != 16 * n:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, expected {16 * (n or 0)}")
    if net is None:
        if "spec" not in meta:
            raise FormatError(f"{path}: no model spec stored and no network supplied")
        net = Network(ModelSpec.from_dict(meta["spec"]))
    if net.layout.size != n:
        raise FormatError(f"{path}: {n} parameters do not fit the network ({net.layout.size})")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = ParamVector(data[:n].copy(), net.layout)
    stored = {k: v for k, v in meta.items() if k not in ("step", "data_seed", "n_params", "spec")}
    ck = Checkpoint(meta["step"], params, data[n:].copy(), meta["data_seed"], stored)
    return ck, meta


def save_mask(path, mask: Mask, extra: dict | None = None) -> None:
    meta = dict(extra or {})
    meta.update(n_bits=int(mask.bits.size), level=int(mask.level))
    _write(path, MASK_MAGIC, meta, np.packbits(mask.bits, bitorder="little").tobytes())


def load_mask(path) -> tuple[Mask, dict]:
    meta, payload = _read(path, MASK_MAGIC)
    n = meta.get("n_bits")
    if not isinstance(n, int) or len(payload) != (n + 7) // 8:
        raise FormatError(f"{path}: bitset length does not match n_bits")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:n].astype(bool)
    return Mask(bits, meta.get("level", 0)), meta
