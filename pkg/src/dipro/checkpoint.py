"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"DIPROCK\\x01"
    offset 8   4 bytes   uint32 header length H
    offset 12  H bytes   UTF-8 JSON header
    offset 12+H          parameter payload, float64 little-endian, C order

The header holds ``format_version``, the full experiment ``config``, its
``config_hash``, the model ``seed``, free-form ``meta`` and a ``tensors``
manifest listing ``name``, ``shape`` and element ``offset`` into the payload
for every parameter in model enumeration order, plus a SHA-256 of the
payload.  See ``docs/checkpoint-format.md``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from dipro.config import ExperimentConfig, from_dict
from dipro.errors import ContractError, ParseError
from dipro.model import DiPro

MAGIC = b"DIPROCK\x01"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save_checkpoint(path, config: ExperimentConfig, state: dict[str, np.ndarray], seed: int = 0,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": int(seed),
        "meta": meta or {},
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, state)``; raises :class:`ParseError` on any corruption."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ContractError(f"checkpoint {path} does not exist") from None
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise ParseError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {header.get('format_version')!r}")
    payload = raw[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ParseError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    flat = np.frombuffer(payload, dtype=_DTYPE)
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        start = int(t["offset"])
        if start + n > flat.size:
            raise ParseError(f"{path}: tensor {t['name']} runs past the payload")
        state[t["name"]] = flat[start:start + n].reshape(t["shape"]).astype(np.float64)
    return header, state


def load_model(path) -> tuple[DiPro, dict]:
    """Rebuild the model described by a checkpoint and load its parameters."""
    header, state = read_checkpoint(path)
    config = from_dict(header["config"])
    if config.hash() != header["config_hash"]:
        raise ParseError(f"{path}: config hash mismatch")
    model = DiPro(config, header.get("seed", 0))
    model.load_state_dict(state)
    model.trained = True
    return model, header
