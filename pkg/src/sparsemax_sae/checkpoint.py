"""Checkpoint files.

Layout: a text header, one ``key=value`` per line, opened by the line
``SAECKPT`` and closed by the line ``end``. Then, for each parameter::

    u64 name length | name bytes (utf-8) | u64 rows | u64 cols | rows*cols float32

All integers and floats are little-endian; payloads are row-major. Vectors
are stored as 1 x n.
"""

from __future__ import annotations

import io
import os
import struct
import warnings
from pathlib import Path

import numpy as np

from .data import FormatError
from .models import OvercompletenessWarning, Sae, build_model

FORMAT_VERSION = 1
MAGIC_LINE = "SAECKPT"
END_LINE = "end"
U64 = struct.Struct("<Q")
F32 = np.dtype("<f4")


def encode_checkpoint(model: Sae) -> bytes:
    header = {"format_version": FORMAT_VERSION, **model.header(), "tensors": len(model.params)}
    buf = io.BytesIO()
    buf.write((MAGIC_LINE + "\n").encode())
    for key, value in header.items():
        buf.write(f"{key}={value}\n".encode())
    buf.write((END_LINE + "\n").encode())
    for name, p in model.params.items():
        mat = p.reshape(1, -1) if p.ndim == 1 else p
        raw = name.encode("utf-8")
        buf.write(U64.pack(len(raw)))
        buf.write(raw)
        buf.write(U64.pack(mat.shape[0]))
        buf.write(U64.pack(mat.shape[1]))
        buf.write(np.ascontiguousarray(mat, dtype=F32).tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: Sae) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    os.replace(tmp, path)


def _read_header(data: bytes) -> tuple[dict, int]:
    pos = 0
    lines = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"checkpoint header not terminated (no '{END_LINE}' line before byte offset {len(data)})")
        line = data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if not lines and line != MAGIC_LINE:
            raise FormatError(f"bad checkpoint magic at byte offset 0: {line[:16]!r}")
        if line == END_LINE:
            break
        lines.append(line)
    header = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        header[key] = value
    return header, pos


def decode_checkpoint(data: bytes) -> Sae:
    header, pos = _read_header(data)
    try:
        version = int(header["format_version"])
        arch = header["architecture"]
        d, m = int(header["d"]), int(header["M"])
        activation = header["activation"]
        k = int(header["K"]) or None
        seed = int(header["seed"])
        bandwidth = float(header["bandwidth"])
        n_tensors = int(header["tensors"])
    except KeyError as exc:
        raise FormatError(f"checkpoint header missing key {exc.args[0]!r}") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {version}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OvercompletenessWarning)
        model = build_model(
            arch, d, m, activation, k=k, bandwidth=bandwidth,
            output_gain=bool(int(header.get("output_gain", "0"))), seed=seed,
        )

    loaded = {}
    for _ in range(n_tensors):
        if pos + 8 > len(data):
            raise FormatError(f"truncated checkpoint at byte offset {pos}")
        (nlen,) = U64.unpack_from(data, pos)
        pos += 8
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 16 > len(data):
            raise FormatError(f"truncated checkpoint at byte offset {pos} (shape of {name!r})")
        (rows,) = U64.unpack_from(data, pos)
        (cols,) = U64.unpack_from(data, pos + 8)
        pos += 16
        nbytes = rows * cols * F32.itemsize
        if pos + nbytes > len(data):
            raise FormatError(
                f"truncated checkpoint at byte offset {len(data)}: tensor {name!r} needs "
                f"{nbytes} bytes from offset {pos}"
            )
        arr = np.frombuffer(data, dtype=F32, count=rows * cols, offset=pos).astype(np.float64)
        pos += nbytes
        if name not in model.params:
            raise FormatError(f"unexpected tensor {name!r} for a {arch}/{activation} model")
        shape = model.params[name].shape
        if int(np.prod(shape)) != rows * cols:
            raise FormatError(f"tensor {name!r} has {rows}x{cols} entries, model expects shape {shape}")
        loaded[name] = arr.reshape(shape)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last tensor at byte offset {pos}")
    missing = set(model.params) - set(loaded)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    model.params = {name: loaded[name] for name in model.params}
    return model


def load_checkpoint(path) -> Sae:
    return decode_checkpoint(Path(path).read_bytes())
