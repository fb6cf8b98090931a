"""Parameter checkpoints: a plain-text manifest followed by raw little-endian float64.

Layout::

    genmc-ckpt 1
    params <count>
    <name> <d1>x<d2>... <offset>      (one line per parameter, offsets in elements)
    end
    <raw float64 bytes>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "genmc-ckpt 1"


class CheckpointError(ValueError):
    pass


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(s) for s in text.split("x"))


def save_checkpoint(path: str | Path, named_params) -> None:
    lines = [MAGIC]
    named = [(n, np.ascontiguousarray(p.data, dtype="<f8")) for n, p in named_params]
    lines.append(f"params {len(named)}")
    offset = 0
    for name, arr in named:
        lines.append(f"{name} {_shape_str(arr.shape)} {offset}")
        offset += arr.size
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for _, arr in named:
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into ``name -> array``; any inconsistency raises :class:`CheckpointError`."""
    raw = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: manifest truncated")
        out = raw[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        return out

    if line() != MAGIC:
        raise CheckpointError(f"{path}: not a genmc checkpoint (bad header)")
    head = line().split()
    if len(head) != 2 or head[0] != "params" or not head[1].isdigit():
        raise CheckpointError(f"{path}: manifest line 2 must be 'params <count>'")
    entries = []
    expected = 0
    for i in range(int(head[1])):
        parts = line().split()
        try:
            name, shape, offset = parts[0], _parse_shape(parts[1]), int(parts[2])
        except (IndexError, ValueError):
            raise CheckpointError(f"{path}: malformed manifest entry {i + 1}: {' '.join(parts)!r}") from None
        if len(parts) != 3 or offset != expected or any(s < 1 for s in shape):
            raise CheckpointError(f"{path}: inconsistent manifest entry for {name!r}")
        size = int(np.prod(shape, dtype=np.int64))
        entries.append((name, shape, offset, size))
        expected += size
    if line() != "end":
        raise CheckpointError(f"{path}: manifest does not close with 'end'")
    body = raw[pos:]
    if len(body) != 8 * expected:
        raise CheckpointError(f"{path}: payload holds {len(body)} bytes, manifest needs {8 * expected}")
    flat = np.frombuffer(body, dtype="<f8")
    return {name: flat[off:off + size].reshape(shape).astype(np.float64)
            for name, shape, off, size in entries}


def load_into(path: str | Path, named_params) -> None:
    """Copy checkpoint values into ``named_params``; names and shapes must match exactly."""
    values = read_checkpoint(path)
    named = list(named_params)
    names = [n for n, _ in named]
    if sorted(names) != sorted(values):
        missing = sorted(set(names) - set(values))
        extra = sorted(set(values) - set(names))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
    for n, p in named:
        if values[n].shape != p.data.shape:
            raise CheckpointError(f"{path}: {n} has shape {values[n].shape}, model expects {p.data.shape}")
        p.data[...] = values[n]
