"""Named-tensor container: a text index over a raw little-endian float64 payload.

Layout, in order: a magic line, one meta line holding a compact JSON object,
one index line per tensor (name, comma-joined dims, byte offset into the
payload), an ``end`` line, then the concatenated tensor payloads. Round-trips
are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError

_MAGIC = "ravqa-tensors 1"


def _shape_str(shape: tuple[int, ...]) -> str:
    return ",".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise CheckpointError(f"bad shape field {text!r}") from exc


def save_tensors(path: str | Path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write tensors plus a JSON meta record; insertion order is preserved."""
    lines = [_MAGIC, json.dumps(meta or {}, separators=(",", ":"), sort_keys=True)]
    blobs: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} is empty or contains whitespace")
        lines.append(f"tensor {name} {_shape_str(tensor.shape)} {offset}")
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    payload = b"".join(blobs)
    Path(path).write_bytes("\n".join(lines).encode("utf-8") + b"\n" + payload)


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Read a container back into tensors and its meta record."""
    raw = Path(path).read_bytes()
    head, sep, rest = raw.partition(b"\nend\n")
    if not sep:
        raise CheckpointError(f"{path}: missing index terminator")
    try:
        lines = head.decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: undecodable index") from exc
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic line {lines[0][:40]!r}")
    if len(lines) < 2:
        raise CheckpointError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad meta record") from exc
    tensors: dict[str, Tensor] = {}
    for line in lines[2:]:
        parts = line.split(" ")
        if len(parts) != 4 or parts[0] != "tensor":
            raise CheckpointError(f"{path}: bad index line {line!r}")
        _, name, shape_text, offset_text = parts
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        shape = _parse_shape(shape_text)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(offset_text)
        stop = start + 8 * count
        if stop > len(rest):
            raise CheckpointError(f"{path}: payload truncated for tensor {name!r}")
        data = np.frombuffer(rest[start:stop], dtype="<f8").astype(np.float64)
        tensors[name] = Tensor(shape, data)
    return tensors, meta
