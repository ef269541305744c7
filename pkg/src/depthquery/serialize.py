"""Binary file formats for checkpoints, hidden-state stacks, and substrates.

All files share one container: the magic bytes ``DABS``, a format version
byte, then length-prefixed records. Each record is a UTF-8 name, a rank,
little-endian 64-bit extents, and the payload as little-endian IEEE-754
32-bit floats. Integers carried in header records are stored as exact f32
values (all are far below 2**24).
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from .errors import FormatError

MAGIC = b"DABS"
VERSION = 1

STACK_HEADER = "__stack_header__"
SUBSTRATE_HEADER = "__substrate_header__"

LAYER_ORDER_FLAGS = {"normal": 0, "reversed": 1, "shuffled": 2}
LAYER_ORDER_NAMES = {v: k for k, v in LAYER_ORDER_FLAGS.items()}


def write_records(path: str, records: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        for name, array in records:
            array = np.asarray(array, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            for extent in array.shape:
                fh.write(struct.pack("<q", extent))
            fh.write(array.astype("<f4", copy=False).tobytes(order="C"))


def read_records(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 5:
        raise FormatError("truncated file: missing version byte", offset=4)
    if blob[4] != VERSION:
        raise FormatError(f"unsupported format version {blob[4]}", offset=4)
    pos = 5
    out: dict[str, np.ndarray] = {}

    def need(nbytes: int, what: str) -> int:
        nonlocal pos
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated file while reading {what}", offset=pos)
        start = pos
        pos += nbytes
        return start

    while pos < len(blob):
        at = need(4, "record name length")
        (name_len,) = struct.unpack_from("<I", blob, at)
        at = need(name_len, "record name")
        name = blob[at:at + name_len].decode("utf-8")
        at = need(4, f"rank of '{name}'")
        (rank,) = struct.unpack_from("<I", blob, at)
        shape = []
        for _ in range(rank):
            at = need(8, f"extents of '{name}'")
            (extent,) = struct.unpack_from("<q", blob, at)
            if extent <= 0:
                raise FormatError(f"non-positive extent {extent} in '{name}'", offset=at)
            shape.append(extent)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        at = need(4 * count, f"payload of '{name}'")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=at)
        if name in out:
            raise FormatError(f"duplicate record '{name}'", offset=at)
        out[name] = data.reshape(shape).copy()
    return out


def save_checkpoint(path: str, params: dict[str, np.ndarray]) -> None:
    """Write named parameter arrays, sorted by name for reproducible bytes."""
    write_records(path, sorted(params.items()))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    return read_records(path)


def save_stack(path: str, states: list[np.ndarray]) -> None:
    """Persist per-layer hidden states, shallow to deep, with an (n, d, L) header."""
    n, d = states[0].shape
    records = [(STACK_HEADER, np.array([n, d, len(states)], dtype=np.float32))]
    records += [(f"layer_{i:03d}", s) for i, s in enumerate(states)]
    write_records(path, records)


def load_stack(path: str) -> list[np.ndarray]:
    records = read_records(path)
    if STACK_HEADER not in records:
        raise FormatError("missing stack header record", offset=5)
    n, d, num_layers = (int(v) for v in records[STACK_HEADER])
    states = []
    for i in range(num_layers):
        key = f"layer_{i:03d}"
        if key not in records:
            raise FormatError(f"missing record '{key}'", offset=len(MAGIC) + 1)
        state = records[key]
        if state.shape != (n, d):
            raise FormatError(
                f"record '{key}' has shape {state.shape}, header says {(n, d)}")
        states.append(state)
    return states


def save_substrate(path: str, enhanced: np.ndarray, levels: list[np.ndarray],
                   layer_order: str) -> None:
    """Substrate container: stack format plus a depth budget K and order flag."""
    n, d = enhanced.shape
    flag = LAYER_ORDER_FLAGS[layer_order]
    header = np.array([n, d, len(levels), flag], dtype=np.float32)
    records = [(SUBSTRATE_HEADER, header), ("enhanced", enhanced)]
    records += [(f"level_{i:03d}", lv) for i, lv in enumerate(levels)]
    write_records(path, records)


def load_substrate(path: str) -> tuple[np.ndarray, list[np.ndarray], str]:
    records = read_records(path)
    if SUBSTRATE_HEADER not in records:
        raise FormatError("missing substrate header record", offset=5)
    n, d, k, flag = (int(v) for v in records[SUBSTRATE_HEADER])
    if flag not in LAYER_ORDER_NAMES:
        raise FormatError(f"unknown layer order flag {flag}")
    enhanced = records["enhanced"]
    if enhanced.shape != (n, d):
        raise FormatError(f"enhanced record shape {enhanced.shape} != header {(n, d)}")
    levels = []
    for i in range(k):
        key = f"level_{i:03d}"
        if key not in records:
            raise FormatError(f"missing record '{key}'")
        levels.append(records[key])
    return enhanced, levels, LAYER_ORDER_NAMES[flag]
