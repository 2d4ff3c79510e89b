"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GMHA1"
    u64 manifest length, manifest JSON (utf-8)
    u32 tensor count
    per tensor: u32 name length, name (utf-8), u32 rank, rank x u64 dims,
                prod(dims) x float64 (little-endian, row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .attention import ArchSpec, ModelDims

MAGIC = b"GMHA1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, manifest: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    head = json.dumps({"format_version": FORMAT_VERSION, **manifest}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<Q", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:5]!r}")
    off = 5
    try:
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        manifest = json.loads(buf[off:off + n])
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode()
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, tensors


def save_model(path, model, step: int = 0, seed: int = 0) -> None:
    manifest = {"arch": asdict(model.spec), "dims": asdict(model.dims), "step": step, "seed": seed}
    save(path, manifest, model.params)


def load_model(path):
    from .model import ToyLM, param_shapes

    manifest, tensors = load(path)
    spec, dims = ArchSpec(**manifest["arch"]), ModelDims(**manifest["dims"])
    for name, shape in param_shapes(spec, dims).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    return ToyLM(spec, dims, tensors), manifest
