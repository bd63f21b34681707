"""Named parameter blocks and the binary checkpoint container.

Container layout::

    b"AKNETCK1"                      8-byte magic
    uint64 little-endian             header length in bytes
    JSON header (utf-8)              {"version": 1, "stores": [...]}
    little-endian float64 payload    blocks back to back

Each store entry carries a ``namespace`` ("theta", "psi", ...), its integer
hyperparameters and a block manifest of ``name``, ``shape`` and byte
``offset`` into the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .numerics import Tape

MAGIC = b"AKNETCK1"
_DTYPE = np.dtype("<f8")

__all__ = ["ParamStore", "save_checkpoint", "load_checkpoint", "param_count"]


class ParamStore:
    """Ordered mapping of block name to float64 array plus integer hyperparameters."""

    kind = "generic"

    def __init__(self, blocks: dict[str, np.ndarray], hyper: dict[str, int] | None = None):
        self.blocks = {k: np.array(v, dtype=np.float64) for k, v in blocks.items()}
        self.hyper = {k: int(v) for k, v in (hyper or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def __iter__(self):
        return iter(self.blocks)

    def names(self) -> list[str]:
        return list(self.blocks)

    def items(self):
        return self.blocks.items()

    def count(self) -> int:
        return sum(v.size for v in self.blocks.values())

    def breakdown(self) -> dict[str, int]:
        return {k: v.size for k, v in self.blocks.items()}

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.blocks.items()}, dict(self.hyper))

    def attach(self, tape: Tape) -> dict:
        """Leaf nodes for every block, keyed by name."""
        return {k: tape.leaf(v, name=k) for k, v in self.blocks.items()}

    def equal(self, other: "ParamStore") -> bool:
        """Bit-level equality of every block and hyperparameter."""
        if self.names() != other.names() or self.hyper != other.hyper:
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    def __repr__(self):
        return f"{type(self).__name__}({self.count()} params, hyper={self.hyper})"


def param_count(store: ParamStore) -> tuple[int, dict[str, int]]:
    """Total trainable parameters and the per-block breakdown."""
    return store.count(), store.breakdown()


def save_checkpoint(path, stores: dict[str, ParamStore]) -> None:
    entries, chunks, offset = [], [], 0
    for namespace, store in stores.items():
        manifest = []
        for name, arr in store.items():
            data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
        entries.append({"namespace": namespace, "kind": store.kind,
                        "hyper": store.hyper, "blocks": manifest})
    header = json.dumps({"version": 1, "stores": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> dict[str, ParamStore]:
    """Read every store in a checkpoint, restoring registered store classes by kind."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an aknet checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    payload = memoryview(raw)[16 + hlen:]
    out = {}
    for entry in header["stores"]:
        blocks = {}
        for b in entry["blocks"]:
            size = int(np.prod(b["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype=_DTYPE, count=size, offset=b["offset"])
            blocks[b["name"]] = arr.reshape(b["shape"]).astype(np.float64)
        cls = _KINDS.get(entry.get("kind"), ParamStore)
        out[entry["namespace"]] = cls(blocks, entry["hyper"])
    return out


_KINDS: dict[str, type] = {}


def register_kind(cls):
    _KINDS[cls.kind] = cls
    return cls
