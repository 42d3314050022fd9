"""Checkpoint files: one JSON header line, then little-endian float64 payloads.

The header lists every entry's name and shape in payload order, the schema
tag ``cld-ckpt-v1``, and a free-form ``meta`` object (model hyperparameters).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .params import ParameterStore

SCHEMA = "cld-ckpt-v1"


def save_checkpoint(path, params: ParameterStore, meta: dict | None = None) -> None:
    names = params.names()
    header = {
        "schema": SCHEMA,
        "entries": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SchemaError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("schema") != SCHEMA:
        raise SchemaError(f"{path}: field 'schema' is {header.get('schema')!r}, expected {SCHEMA!r}")
    payload = raw[nl + 1:]
    arrays, off = {}, 0
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = payload[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise SchemaError(f"{path}: payload truncated at entry {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        off += 8 * n
    if off != len(payload):
        raise SchemaError(f"{path}: {len(payload) - off} trailing payload bytes")
    return arrays, header.get("meta", {})


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    arrays, meta = read_checkpoint(path)
    store = ParameterStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    return store, meta
