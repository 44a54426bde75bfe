"""File helpers: atomic writes, CSV tables and the binary model container.

Model container layout (all integers little-endian)::

    magic      8 bytes   e.g. b"CSDMAP01" or b"CSGAN001"
    hlen       uint64    length of the JSON header in bytes
    header     hlen      UTF-8 JSON; header["blocks"] lists block names in order
    repeated for every block:
        nlen   uint32    length of the block name
        name   nlen      UTF-8
        ndim   uint32
        shape  ndim * uint64
        data   prod(shape) * 8 bytes, float64 little-endian, C order
"""

import contextlib
import csv
import io
import json
import os
import struct
import tempfile

import numpy as np


@contextlib.contextmanager
def atomic_open(path, mode="w", **kwargs):
    """Write to a temp file in the target directory, rename on success."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrix_csv(path, header, matrix):
    matrix = np.asarray(matrix, dtype=float)
    with atomic_open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in matrix:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_matrix_csv(path):
    """Return ``(header, matrix)`` for a numeric CSV with one header row."""
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def write_json(path, obj):
    with atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def pack_model(magic: bytes, header: dict, blocks: dict) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header, blocks=list(blocks))
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def unpack_model(data: bytes, magic: bytes):
    if data[:8] != magic:
        raise ValueError(f"bad magic {data[:8]!r}, expected {magic!r}")
    pos = 8
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode())
    pos += hlen
    blocks = {}
    for _ in header["blocks"]:
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        blocks[name] = arr.astype(float)
    return header, blocks


def save_model(path, magic, header, blocks):
    with atomic_open(path, "wb") as fh:
        fh.write(pack_model(magic, header, blocks))


def load_model(path, magic):
    with open(path, "rb") as fh:
        return unpack_model(fh.read(), magic)
