"""Checkpoint format: named float64 blobs with shape headers and a manifest
hash, following the same little-endian header conventions as TAFVOL01.

Layout: 8-byte magic "TAFCKPT1", u32 version, u32 entry count, then per
entry (sorted by name): u32 name length, name bytes, u32 ndim, u32 dims,
float64 payload; finally the 32-byte sha256 of all entry bytes.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from ..errors import FormatError, IoError

_MAGIC = b"TAFCKPT1"
_VERSION = 1


def _entry_bytes(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    dims = arr.shape
    header = struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    return header + arr.astype("<f8", copy=False).tobytes(order="C")


def save_checkpoint(path, state: dict[str, np.ndarray]) -> str:
    """Write a state dict; returns the manifest hash (hex)."""
    body = b"".join(_entry_bytes(n, np.asarray(state[n], dtype=np.float64))
                    for n in sorted(state))
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _VERSION, len(state)))
        f.write(body)
        f.write(digest)
    return digest.hex()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 + 32:
        raise FormatError(f"{path}: truncated checkpoint")
    if raw[:8] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, count = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body, digest = raw[16:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: manifest hash mismatch (corrupt payload)")
    state = {}
    off = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
        except (struct.error, ValueError) as e:
            raise FormatError(f"{path}: truncated entry table") from e
        state[name] = arr.copy()
    if off != len(body):
        raise FormatError(f"{path}: trailing bytes after last entry")
    return state


def state_hash(state: dict[str, np.ndarray], prefix: str = "") -> str:
    """sha256 over the sorted entries whose names start with `prefix`."""
    h = hashlib.sha256()
    for name in sorted(state):
        if not name.startswith(prefix):
            continue
        h.update(_entry_bytes(name, np.asarray(state[name], dtype=np.float64)))
    return h.hexdigest()
