"""Checkpoint file format.

    8 bytes   magic  b"EEGSALCK"
    8 bytes   little-endian uint64 header length
    N bytes   UTF-8 JSON header (sorted keys)
    payload   arrays back to back, little-endian, in header order

The header lists every array (name, dtype, shape, offset, nbytes), the
metadata dict and the content hash. Arrays are written in sorted name order,
so saving the same content always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"EEGSALCK"


def content_hash(arrays: dict, prefixes: Optional[tuple] = None) -> str:
    """SHA-256 over sorted (name, dtype, shape, bytes); optionally restricted to name prefixes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        a = np.asarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        h.update(name.encode())
        h.update(b"\0" + a.dtype.str.encode() + b"\0" + repr(tuple(a.shape)).encode() + b"\0")
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    arrays: dict
    meta: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return content_hash(self.arrays)

    def subset(self, prefixes) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(tuple(prefixes))}

    def partial(self, prefixes, base: "Checkpoint", kind: str) -> "Checkpoint":
        """Checkpoint holding only ``prefixes`` arrays plus a reference to ``base``."""
        meta = dict(self.meta)
        meta["kind"] = kind
        meta["base_hash"] = base.hash
        return Checkpoint(self.subset(prefixes), meta)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    names = sorted(ckpt.arrays)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        a = np.asarray(ckpt.arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    digest = content_hash(ckpt.arrays)
    header = json.dumps({"arrays": entries, "meta": ckpt.meta, "content_hash": digest},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return digest


def load_checkpoint(path, base: Optional[Checkpoint] = None) -> Checkpoint:
    """Read a checkpoint; when it references a base, ``base`` must match that hash."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    payload = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: array {e['name']} truncated")
        a = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = a.copy()
    ckpt = Checkpoint(arrays, header["meta"])
    if ckpt.hash != header["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch (file corrupt)")
    ref = ckpt.meta.get("base_hash")
    if ref is not None and base is not None and base.hash != ref:
        raise CheckpointError(
            f"{path} was trained against base {ref[:12]}..., but the supplied base is {base.hash[:12]}..."
        )
    return ckpt
