"""Named-tensor checkpoint files.

A checkpoint is a UTF-8 text manifest followed by concatenated RTEN records::

    ADVLAB-CKPT 1
    meta <key> <value>                 (zero or more)
    tensor <name> <d0,d1,..> <offset> <length>
    END
    <RTEN bytes...>

Offsets are relative to the first byte after the ``END\\n`` line.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from advlab.tensor_core import rten

HEADER = "ADVLAB-CKPT 1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    lines = [HEADER]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in f"{k}{v}"):
            raise CheckpointError(f"meta entry {k!r} must not contain whitespace")
        lines.append(f"meta {k} {v}")
    blobs, offset = [], 0
    for name, arr in tensors.items():
        blob = rten.encode(arr)
        shape = ",".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"tensor {name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("END")
    return ("\n".join(lines) + "\n").encode() + b"".join(blobs)


def loads(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    marker = b"\nEND\n"
    cut = buf.find(marker)
    if not buf.startswith(HEADER.encode()) or cut < 0:
        raise CheckpointError(f"{source}: not a checkpoint (missing header or END line)")
    base = cut + len(marker)
    tensors, meta = {}, {}
    for line in buf[:cut].decode().splitlines()[1:]:
        parts = line.split()
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 5:
            name, shape, off, length = parts[1], parts[2], int(parts[3]), int(parts[4])
            arr, end = rten.decode(buf, base + off, source)
            if end - (base + off) != length:
                raise CheckpointError(f"{source}: tensor {name!r} length mismatch")
            want = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            if arr.shape != want:
                raise CheckpointError(f"{source}: tensor {name!r} shape {arr.shape} != manifest {want}")
            tensors[name] = arr
        else:
            raise CheckpointError(f"{source}: bad manifest line {line!r}")
    return tensors, meta


def save(path, tensors, meta=None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes(), str(path))
