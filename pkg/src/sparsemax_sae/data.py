"""Synthetic superposition data and the SAEACT1 activation file format.

SAEACT1 layout (all little-endian)::

    bytes 0..7    magic b"SAEACT1\\0"
    bytes 8..15   dim   (uint64)
    bytes 16..23  count (uint64)
    bytes 24..    count * dim float32, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numeric import Rng, as_matrix, unit_columns

MAGIC = b"SAEACT1\0"
HEADER = struct.Struct("<8sQQ")
F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class DataExhausted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# synthetic superposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SuperpositionSpec:
    d: int
    m_true: int
    mean_active: float
    magnitude_lo: float = 0.5
    magnitude_hi: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if not self.d >= 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not self.m_true > self.d:
            raise ValueError(f"m_true must exceed d (superposition), got m_true={self.m_true}, d={self.d}")
        if not 0 < self.mean_active <= self.m_true:
            raise ValueError(f"mean_active must lie in (0, m_true], got {self.mean_active}")
        if not 0 <= self.magnitude_lo <= self.magnitude_hi:
            raise ValueError(f"need 0 <= magnitude_lo <= magnitude_hi, got {self.magnitude_lo}, {self.magnitude_hi}")

    def to_dict(self) -> dict:
        return asdict(self)


class SuperpositionStream:
    """Infinite, deterministic stream of sparse mixtures of ground-truth directions.

    The activity mask and the magnitudes come from separate child streams, so
    the concatenated output does not depend on how it is split into batches.
    Streams with different ``stream`` ids share the ground truth but draw
    independent samples (0 for training, 1 for evaluation by convention).
    """

    def __init__(self, spec: SuperpositionSpec, stream: int = 0):
        spec.validate()
        self.spec = spec
        self.stream = stream
        root = Rng(spec.seed)
        # d x m_true, unit columns
        self.ground_truth = unit_columns(root.spawn(0).normal((spec.d, spec.m_true)))
        self._active_rng = root.spawn(1 + 2 * stream)
        self._mag_rng = root.spawn(2 + 2 * stream)
        self.p_active = spec.mean_active / spec.m_true
        self.emitted = 0

    def sample(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` samples; returns ``(samples n x d, coefficients n x m_true)``."""
        s = self.spec
        active = self._active_rng.random((n, s.m_true)) < self.p_active
        mags = self._mag_rng.uniform(s.magnitude_lo, s.magnitude_hi, (n, s.m_true))
        coeffs = np.where(active, mags, 0.0)
        self.emitted += n
        return coeffs @ self.ground_truth.T, coeffs

    def next_batch(self, n: int) -> np.ndarray:
        return self.sample(n)[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next_batch(1)[0]


def gen_superposition(spec: SuperpositionSpec, stream: int = 0) -> SuperpositionStream:
    return SuperpositionStream(spec, stream)


class ArraySource:
    """Sequential batches over a fixed matrix; running out is an error."""

    def __init__(self, data):
        self.data = as_matrix(data, "data")
        self.pos = 0

    def next_batch(self, n: int) -> np.ndarray:
        end = self.pos + n
        if end > self.data.shape[0]:
            raise DataExhausted(
                f"requested samples {self.pos}..{end} but the source holds only {self.data.shape[0]}"
            )
        batch = self.data[self.pos:end]
        self.pos = end
        return batch


# --------------------------------------------------------------------------
# SAEACT1 files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationFile:
    path: Path
    dim: int
    count: int

    @property
    def nbytes(self) -> int:
        return HEADER.size + self.count * self.dim * F32.itemsize

    def read_all(self) -> np.ndarray:
        raw = np.fromfile(self.path, dtype=F32, offset=HEADER.size, count=self.count * self.dim)
        return raw.astype(np.float64).reshape(self.count, self.dim)

    def batches(self, batch_size: int, *, drop_last: bool = False) -> Iterator[np.ndarray]:
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        row_bytes = self.dim * F32.itemsize
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size)
            remaining = self.count
            while remaining > 0:
                n = min(batch_size, remaining)
                if n < batch_size and drop_last:
                    return
                buf = fh.read(n * row_bytes)
                yield np.frombuffer(buf, dtype=F32).astype(np.float64).reshape(n, self.dim)
                remaining -= n


def write_activations(path, data) -> ActivationFile:
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise FormatError(f"activation data must be 2-D, got shape {data.shape}")
    count, dim = data.shape
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(data, dtype=F32)
    if not np.all(np.isfinite(payload)):
        raise FormatError("activation data contains non-finite values after float32 conversion")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, dim, count))
        fh.write(payload.tobytes())
    os.replace(tmp, path)
    return ActivationFile(path, dim, count)


def read_activations(path) -> ActivationFile:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < len(MAGIC) or head[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0, expected {MAGIC!r}, got {head[:len(MAGIC)]!r}")
    if len(head) < HEADER.size:
        raise FormatError(f"{path}: header truncated at byte offset {len(head)}, expected {HEADER.size} bytes")
    _, dim, count = HEADER.unpack(head)
    info = ActivationFile(path, int(dim), int(count))
    if size != info.nbytes:
        raise FormatError(
            f"{path}: expected {info.nbytes} bytes for {count} x {dim} float32 rows, "
            f"file has {size} (mismatch at byte offset {min(size, info.nbytes)})"
        )
    return info


def load_activations(path) -> np.ndarray:
    return read_activations(path).read_all()
