"""Binary checkpoint files.

Layout (little-endian)::

    b"OLEDCKPT"                 magic
    u32 version
    u32 n, n bytes              config snapshot, UTF-8 "key = value" lines
    u32 count                   number of tensor entries, then per entry:
        u16 n, n bytes          name
        u8 ndim, ndim * u32     shape
        float32 * prod(shape)   data
    32 bytes                    SHA-256 of everything above
"""

import hashlib
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"OLEDCKPT"
VERSION = 1


def format_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def parse_config_text(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(path, entries, config=None):
    """Write named float32 tensors plus a config snapshot."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = format_config(config or {}).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path):
    """Return ``(config, entries)``; the checksum is verified first."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint {path}") from None
    if len(data) < len(MAGIC) + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    version, = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    n, = take("<I")
    config = parse_config_text(body[pos:pos + n].decode("utf-8"))
    pos += n
    count, = take("<I")
    entries = {}
    for _ in range(count):
        n, = take("<H")
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        ndim, = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} unexpected trailing bytes")
    return config, entries


def model_entries(R=None, MM=None, adam=None):
    """Flatten reconstructor, mask generator and optimizer state into named tensors."""
    entries = {}
    if R is not None:
        entries.update({f"R/{k}": v for k, v in R.state().items()})
    if MM is not None:
        gen = getattr(MM, "generator", MM)
        entries.update({f"M/{k}": v for k, v in gen.state().items()})
    for prefix, state in (adam or {}).items():
        for k in state.m:
            entries[f"adam.{prefix}.m/{k}"] = state.m[k]
            entries[f"adam.{prefix}.v/{k}"] = state.v[k]
    return entries


def load_into(entries, R=None, MM=None):
    if R is not None:
        R.load_state({k[2:]: v for k, v in entries.items() if k.startswith("R/")})
    if MM is not None:
        gen = getattr(MM, "generator", MM)
        gen.load_state({k[2:]: v for k, v in entries.items() if k.startswith("M/")})
