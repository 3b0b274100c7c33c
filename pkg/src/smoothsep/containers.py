"""Binary tensor containers and checkpoint manifests.

Container layout: magic ``SSNT``, version byte 0x01, dtype byte
(0x00 = float32, 0x01 = uint8), rank byte, then ``rank`` little-endian
uint32 dims, then the row-major payload.

A checkpoint is a directory holding one container per parameter, a
``manifest.txt`` mapping parameter name -> shape -> container file, and
a ``config.cfg`` dump of the configuration that produced it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSNT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}


class ContainerError(IOError):
    """Malformed or unsupported tensor container."""


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError("rank exceeds container limit")
    header = MAGIC + struct.pack(
        "<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    version, dcode, rank = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if dcode not in _CODE_DTYPES:
        raise ContainerError(f"{path}: unknown dtype code {dcode}")
    dims = struct.unpack(f"<{rank}I", blob[7:7 + 4 * rank])
    dtype = _CODE_DTYPES[dcode]
    payload = blob[7 + 4 * rank:]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ContainerError(
            f"{path}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_checkpoint(directory, params: dict, config_text: str = "") -> None:
    """Write one container per parameter plus manifest and config dump."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = params[name].data if hasattr(params[name], "data") else params[name]
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        fname = name.replace("/", "_").replace(".", "_") + ".ssnt"
        write_tensor(directory / fname, arr)
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    if config_text:
        (directory / "config.cfg").write_text(config_text)


def load_checkpoint(directory) -> dict:
    """Read the manifest back into a name -> float32 ndarray mapping."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise ContainerError(f"{manifest} not found")
    params = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, fname = line.split()
        arr = read_tensor(directory / fname)
        expect = tuple(int(s) for s in shape.split("x")) if shape != "" else ()
        if arr.shape != expect:
            raise ContainerError(
                f"{name}: manifest shape {expect} != container {arr.shape}")
        params[name] = arr
    return params


def load_checkpoint_config(directory) -> str:
    path = Path(directory) / "config.cfg"
    return path.read_text() if path.exists() else ""
