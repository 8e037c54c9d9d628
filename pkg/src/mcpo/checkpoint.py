"""Self-describing checkpoint files.

Layout::

    MCPO-CHECKPOINT 1\\n
    <one line of JSON: header>\\n
    <payload: float64 arrays, little-endian, concatenated in header order>

The header carries the format version, the network architecture, the algorithm,
all scalar training state, and an ``arrays`` list of ``[name, length]`` pairs
describing the payload. JSON keys are sorted so equal states give equal bytes.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MCPO-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomically write ``header`` plus the named flat arrays to ``path``."""
    names = list(arrays)
    head = dict(header, format_version=FORMAT_VERSION,
                arrays=[[n, int(np.asarray(arrays[n]).size)] for n in names],
                byte_order="little-endian float64")
    blob = b"".join(np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64).ravel())
                    .astype(_DTYPE).tobytes() for n in names)
    data = MAGIC + b" %d\n" % FORMAT_VERSION + json.dumps(head, sort_keys=True).encode() + b"\n" + blob
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    first, sep, rest = data.partition(b"\n")
    if not sep or not first.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(first[len(MAGIC):].strip())
    except ValueError:
        raise CheckpointError(f"{path}: unreadable format version") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    head_line, sep, blob = rest.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(head_line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    expected = sum(n for _, n in header["arrays"]) * _DTYPE.itemsize
    if len(blob) != expected:
        raise CheckpointError(f"{path}: payload has {len(blob)} bytes, header promises {expected}")
    flat = np.frombuffer(blob, dtype=_DTYPE).astype(np.float64)
    arrays, start = {}, 0
    for name, n in header["arrays"]:
        arrays[name] = flat[start:start + n].copy()
        start += n
    return header, arrays
