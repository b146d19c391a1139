"""File formats: TNSR tensors, binary PGM/PPM images, key=value manifests."""

from __future__ import annotations

import contextlib
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "u1"}


class FormatError(ValueError):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    """``TNSR v1 <dtype> <rank> <d0> ...`` header line, then little-endian row-major data."""
    a = np.asarray(array)
    key = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.int32): "i32",
           np.dtype(np.int64): "i64", np.dtype(np.uint8): "u8"}.get(a.dtype.newbyteorder("="))
    if key is None:
        raise FormatError(f"write_tensor: unsupported dtype {a.dtype}")
    header = " ".join(["TNSR", "v1", key, str(a.ndim), *map(str, a.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(a, dtype=_DTYPES[key]).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n")
    parts = raw[:end].decode("ascii").split()
    if len(parts) < 4 or parts[0] != "TNSR" or parts[1] != "v1" or parts[2] not in _DTYPES:
        raise FormatError(f"read_tensor: bad header in {path}")
    rank = int(parts[3])
    shape = tuple(int(s) for s in parts[4 : 4 + rank])
    if len(shape) != rank:
        raise FormatError(f"read_tensor: header rank {rank} but {len(shape)} extents")
    dt = np.dtype(_DTYPES[parts[2]])
    body = raw[end + 1 :]
    if len(body) != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"read_tensor: payload size does not match shape {shape}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


# ---------------------------------------------------------------- netpbm


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    return w, h, data[pos + 1 :]


def write_ppm(path, grid: np.ndarray) -> None:
    """Write a ``(3, H, W)`` grid in [0, 1] as binary P6."""
    c, h, w = grid.shape
    if c != 3:
        raise FormatError(f"write_ppm: expected 3 channels, got {c}")
    px = to_u8(grid).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P6")
    px = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5; a binary mask is stored as 0 / 255."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(to_u8(m).tobytes())


def read_pgm(path, binary: bool = True) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P5")
    px = np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)
    if binary:
        return (px > 127).astype(np.float64)
    return px.astype(np.float64) / 255.0


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 8-bit grid so files round-trip exactly."""
    return to_u8(x).astype(np.float64) / 255.0


# ---------------------------------------------------------------- manifests


def write_kv(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v}\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@contextlib.contextmanager
def atomic_dir(target):
    """Build a directory under a temporary name, then rename it into place.

    On error the partial directory is removed and ``target`` is untouched.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.chmod(tmp, 0o755)
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


@contextlib.contextmanager
def atomic_file(target, mode: str = "w"):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    os.close(fd)
    try:
        with open(tmp, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
    except BaseException:
        os.unlink(tmp)
        raise
    os.chmod(tmp, 0o644)
    os.replace(tmp, target)


@contextlib.contextmanager
def atomic_path(target):
    """Yield a temporary sibling path; it replaces ``target`` on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    os.close(fd)
    try:
        yield Path(tmp)
    except BaseException:
        os.unlink(tmp)
        raise
    os.chmod(tmp, 0o644)
    os.replace(tmp, target)
