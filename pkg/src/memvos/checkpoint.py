"""Single-file binary checkpoints.

Layout, in order:

1. 8-byte little-endian unsigned header length ``L``;
2. ``L`` bytes of UTF-8 JSON: ``{"meta": {...}, "tensors": {name:
   {"shape": [...], "dtype": "float64", "offset": int, "nbytes": int}}}``;
3. raw little-endian tensor payloads at the stated offsets (relative to
   the end of the header).

Parameters reachable through several module paths are physically one
object; the writer keeps the first path name and drops the rest, so a
weight shared by two blocks is stored exactly once. Loading assigns
into the existing parameter objects of an already-built module, which
leaves any sharing in the module tree intact.
"""

from __future__ import annotations

import json
import struct
from typing import Any, Dict

import numpy as np

from memvos.nn import Module

_MAGIC_KEY = "format"
_FORMAT_NAME = "memvos-checkpoint-v1"

_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointMismatch(ValueError):
    """Checkpoint and module disagree on names or tensor extents."""


def _unique_named_parameters(module: Module):
    seen: set[int] = set()
    for name, p in module.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        yield name, p


def save_checkpoint(path: str, module: Module, meta: Dict[str, Any] | None = None) -> None:
    entries: Dict[str, Dict[str, Any]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, p in _unique_named_parameters(module):
        dtype_name = p.data.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported parameter dtype {dtype_name} for {name}")
        raw = np.ascontiguousarray(p.data, dtype=_DTYPES[dtype_name]).tobytes()
        entries[name] = {
            "shape": list(p.data.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)

    header_obj = {"meta": dict(meta or {}), "tensors": entries}
    header_obj["meta"].setdefault(_MAGIC_KEY, _FORMAT_NAME)
    header = json.dumps(header_obj, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str) -> Dict[str, Any]:
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise CheckpointMismatch(f"{path}: truncated before header length")
        (hlen,) = struct.unpack("<Q", prefix)
        header = fh.read(hlen)
        if len(header) != hlen:
            raise CheckpointMismatch(f"{path}: truncated header")
    try:
        obj = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"{path}: header is not valid JSON: {exc}") from exc
    if "tensors" not in obj or "meta" not in obj:
        raise CheckpointMismatch(f"{path}: header missing meta/tensors sections")
    return obj


def load_checkpoint(path: str, module: Module) -> Dict[str, Any]:
    """Fill a built module's parameters from a checkpoint; returns meta.

    Every stored tensor must land on a module parameter of the same
    shape and every unique module parameter must be covered, otherwise
    a :class:`CheckpointMismatch` describes the first offender.
    """
    obj = read_header(path)
    entries = obj["tensors"]
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        fh.seek(8 + hlen)
        payload = fh.read()

    module_params = dict(_unique_named_parameters(module))
    stored = set(entries)
    present = set(module_params)
    if stored != present:
        missing = sorted(present - stored)
        extra = sorted(stored - present)
        raise CheckpointMismatch(
            f"{path}: tensor names do not match module"
            + (f"; missing from file: {missing[:4]}" if missing else "")
            + (f"; unknown in module: {extra[:4]}" if extra else ""))

    for name, entry in entries.items():
        p = module_params[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise CheckpointMismatch(
                f"{path}: extent mismatch for {name}: file {shape} vs module {p.data.shape}")
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointMismatch(f"{path}: unsupported dtype {dtype} for {name}")
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointMismatch(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
        # frombuffer views are read-only; copy so in-place updates still work
        p.data = arr.astype(np.dtype(dtype), copy=True)
    return obj["meta"]
