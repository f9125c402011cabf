"""Binary tensor files (BTF1), point clouds (PC3F) and parameter bundles."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BevIOError

BTF_MAGIC = b"BTF1"
PC3F_MAGIC = b"PC3F"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise BevIOError(f"cannot read {path}: {exc.strerror}") from exc


def encode_btf(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = BTF_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_btf(data: bytes, source="<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != BTF_MAGIC:
        raise BevIOError(f"{source}: not a BTF1 file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * ndim
    if len(data) < head:
        raise BevIOError(f"{source}: truncated BTF1 header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(shape)) if ndim else 0
    if len(data) != head + 4 * count:
        raise BevIOError(f"{source}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype="<f4", offset=head).astype(np.float32).reshape(shape)


def save_btf(path, array) -> None:
    atomic_write_bytes(path, encode_btf(array))


def load_btf(path) -> np.ndarray:
    return decode_btf(_read(path), source=str(path))


def save_pc3f(path, points) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    atomic_write_bytes(path, PC3F_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes())


def load_pc3f(path) -> np.ndarray:
    data = _read(path)
    if len(data) < 8 or data[:4] != PC3F_MAGIC:
        raise BevIOError(f"{path}: not a PC3F file")
    (count,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 12 * count:
        raise BevIOError(f"{path}: payload size does not match {count} points")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float32).reshape(count, 3)


def save_params(directory, params: dict[str, np.ndarray]) -> None:
    """Write a parameter bundle: one BTF1 file per tensor plus manifest.json."""
    directory = Path(directory)
    manifest = {}
    for name in sorted(params):
        fname = f"{name}.btf"
        save_btf(directory / fname, params[name])
        manifest[name] = {"file": fname, "shape": list(np.shape(params[name]))}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    try:
        manifest = json.loads(_read(directory / "manifest.json"))
    except json.JSONDecodeError as exc:
        raise BevIOError(f"{directory / 'manifest.json'}: invalid JSON") from exc
    params = {}
    for name, entry in manifest.items():
        arr = load_btf(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise BevIOError(f"{directory / entry['file']}: shape {arr.shape} != manifest {entry['shape']}")
        params[name] = arr
    return params
