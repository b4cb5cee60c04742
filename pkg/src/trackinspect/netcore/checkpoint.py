"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic        4 bytes   b"TRKI"
    version      u32       currently 1
    arch_hash    32 bytes  sha256 of the canonical architecture JSON
    meta_len     u32       length of the UTF-8 JSON metadata blob
    meta         meta_len bytes
    n_tensors    u32
    n_tensors records:
        name_len u16, name (UTF-8)
        kind     u8        0 = real float32, 1 = complex (interleaved re/im float32)
        ndim     u8
        dims     ndim x u32
        data     prod(dims) float32 values (x2 for complex), C order

The metadata blob carries anything non-tensor (iteration counter, config).
"""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"TRKI"
VERSION = 1


class CheckpointError(ValueError):
    pass


def arch_hash(arch):
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def save_checkpoint(path, tensors, arch, meta=None):
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(arch_hash(arch))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            if np.iscomplexobj(arr):
                kind = 1
                data = np.stack([arr.real, arr.imag], axis=-1).astype("<f4")
            else:
                kind = 0
                data = arr.astype("<f4")
            fh.write(struct.pack("<BB", kind, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(data).tobytes())


def load_checkpoint(path, arch=None):
    """Returns (tensors, meta, arch_hash). Verifies the hash when ``arch`` is given."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = buf[8:40]
    if arch is not None and stored_hash != arch_hash(arch):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    pos = 40
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        kind, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count_f = int(np.prod(dims, dtype=np.int64)) * (2 if kind == 1 else 1)
        data = np.frombuffer(buf, dtype="<f4", count=count_f, offset=pos).astype(np.float32)
        pos += 4 * count_f
        if kind == 1:
            pairs = data.reshape(tuple(dims) + (2,))
            tensors[name] = pairs[..., 0] + 1j * pairs[..., 1]
        else:
            tensors[name] = data.reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return tensors, meta, stored_hash
