"""Checkpoints: a text manifest plus one raw little-endian float32 payload.

Layout of ``<dir>/manifest.txt``::

    # transvert checkpoint v1
    @key=value                  (free-form metadata, one per line)
    name<TAB>d0,d1,...<TAB>offset   (offset counted in float32 elements)

``<dir>/payload.f32`` holds the arrays back to back in manifest order.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
PAYLOAD = "payload.f32"
_HEADER = "# transvert checkpoint v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [_HEADER]
    for k, v in (meta or {}).items():
        text = str(v)
        if "\n" in text or "=" in str(k):
            raise CheckpointError(f"metadata {k!r} is not representable on one line")
        lines.append(f"@{k}={text}")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"bad tensor name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f4")
        lines.append(f"{name}\t{','.join(str(d) for d in a.shape)}\t{offset}")
        chunks.append(a.ravel())
        offset += a.size
    tmp = path / (PAYLOAD + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c.tobytes())
    os.replace(tmp, path / PAYLOAD)
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    """Return ``(arrays, meta)``; arrays are float32 copies."""
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8").splitlines()
        payload = np.fromfile(path / PAYLOAD, dtype="<f4")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if not text or text[0] != _HEADER:
        raise CheckpointError(f"{path / MANIFEST}: missing header")
    meta, arrays = {}, {}
    for ln in text[1:]:
        if not ln.strip():
            continue
        if ln.startswith("@"):
            k, _, v = ln[1:].partition("=")
            meta[k] = v
            continue
        try:
            name, shape_s, off_s = ln.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            off = int(off_s)
        except ValueError as exc:
            raise CheckpointError(f"malformed manifest line: {ln!r}") from exc
        n = int(np.prod(shape))
        if off + n > payload.size:
            raise CheckpointError(f"tensor {name} exceeds payload size")
        arrays[name] = payload[off : off + n].reshape(shape).astype(np.float32)
    return arrays, meta
