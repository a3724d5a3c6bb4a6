"""Binary container for networks and raw tensors.

Layout::

    b"NRCK"                 4-byte magic
    uint32 LE               format version
    uint32 LE               header length in bytes
    header                  UTF-8 JSON (structure + tensor names/shapes, in blob order)
    blobs                   little-endian float32, concatenated in header order

The header is plain text so a file can be inspected with ``head -c``.
Float32 blobs make the round trip bit-exact for float32 networks.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .blocks import Block, BlockSpec
from .errors import CheckpointFormatError, CheckpointShapeError, CheckpointVersionError, SpecError
from .network import Network

MAGIC = b"NRCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: file too short for a netrecast header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads version {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    offset = start + hlen
    arrays = []
    for entry in header.get("tensors", []):
        shape = tuple(int(v) for v in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated while reading tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        arrays.append((entry["name"], arr.astype(np.float32)))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return header, arrays


def _network_header(net: Network) -> dict:
    return {
        "kind": "network",
        "name": net.name,
        "input_shape": list(net.input_shape),
        "stem": net.stem.spec.to_dict() if net.stem else None,
        "blocks": [b.spec.to_dict() for b in net.blocks],
        "classifier": net.classifier.spec.to_dict(),
    }


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    header = _network_header(net)
    if extra:
        header["extra"] = extra
    write_container(path, header, net.state_items())


def load_checkpoint(path) -> Network:
    """Rebuild a network from ``path``; nothing is returned unless every tensor matches."""
    header, arrays = read_container(path)
    if header.get("kind") != "network":
        raise CheckpointFormatError(f"{path}: container holds {header.get('kind')!r}, not a network")
    try:
        stem = Block(BlockSpec.from_dict(header["stem"]), 0, ("stem",)) if header.get("stem") else None
        blocks = [Block(BlockSpec.from_dict(d), 0, ("block", i)) for i, d in enumerate(header["blocks"])]
        head = Block(BlockSpec.from_dict(header["classifier"]), 0, ("classifier",))
        input_shape = header["input_shape"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed structure header ({exc})") from exc
    except SpecError as exc:
        raise CheckpointShapeError(f"{path}: invalid block in structure header: {exc}") from exc
    named = ([("stem", stem)] if stem else []) + [(f"blocks.{i}", b) for i, b in enumerate(blocks)]
    named.append(("classifier", head))
    expected = [(f"{p}.{n}", a) for p, blk in named for n, a in blk.state_items()]
    stored = dict(arrays)
    if len(stored) != len(arrays):
        raise CheckpointFormatError(f"{path}: duplicate tensor names")
    for name, target in expected:
        if name not in stored:
            raise CheckpointShapeError(f"{path}: missing tensor {name!r}")
        if stored[name].shape != target.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {stored[name].shape}, structure requires {target.shape}"
            )
    extra_names = set(stored) - {n for n, _ in expected}
    if extra_names:
        raise CheckpointShapeError(f"{path}: unexpected tensors {sorted(extra_names)}")
    try:
        net = Network(input_shape, stem, blocks, head, header.get("name", ""))
    except SpecError as exc:
        raise CheckpointShapeError(f"{path}: structure header is inconsistent: {exc}") from exc
    for prefix, blk in net.all_blocks():
        for n, t in blk.params:
            t.data = stored[f"{prefix}.{n}"].copy()
        for n in blk.buffers:
            blk.buffers[n] = stored[f"{prefix}.{n}"].copy()
    return net


def checkpoint_extra(path) -> dict:
    header, _ = read_container(path)
    return header.get("extra", {})
