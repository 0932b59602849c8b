"""Single-file model checkpoints.

Layout: an 8-byte magic, an 8-byte big-endian header length, a JSON
header, then all tensor payloads as contiguous little-endian float64.
The header records the config, a tensor directory (name, shape, byte
offset), optional scalar extras, and a sha256 of the payload so load can
detect corruption. Writing is fully deterministic: same state in, same
bytes out.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ConfigError, ParseError
from .model import ModelConfig
from .numerics import ParamStore

MAGIC = b"LMCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: ParamStore, extras: dict | None = None,
                    aux_tensors: dict | None = None) -> None:
    """Write config + parameters (+ optional extras) to one file.

    extras must be JSON-serializable scalars; aux_tensors holds named
    float arrays stored outside the parameter set (optimizer slots etc.).
    """
    directory = []
    chunks = []
    offset = 0
    items = [(name, params[name].data) for name in params.names()]
    for name, arr in (aux_tensors or {}).items():
        items.append((name, np.asarray(arr, dtype=np.float64)))
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "penalized": sorted(params.penalized_names()),
        "tensors": directory,
        "extras": extras or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, extras, aux_tensors).

    Raises ParseError on a bad magic, truncated file, payload hash
    mismatch, or unsupported format version.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack(">Q", blob[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start: start + hlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad header json: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = blob[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ParseError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ParseError(f"{path}: payload sha256 mismatch (file damaged?)")

    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ConfigError) as exc:
        raise ParseError(f"{path}: bad config in header: {exc}") from exc
    penalized = set(header.get("penalized", []))
    params = ParamStore()
    aux = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        arr = arr.reshape(shape).astype(np.float64)
        name = entry["name"]
        if name.startswith("aux."):
            aux[name] = arr
        else:
            params.add(name, arr, penalized=name in penalized)
    return config, params, header.get("extras", {}), aux
