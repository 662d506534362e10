"""Dense matrix primitives: arithmetic, seeded sampling, hashing, and tensor files.

Matrices are 2-D numpy arrays, row-major, float64 at working precision.
Float32 exists only as a storage option in the WTN1 file format; everything
loaded back into memory is upcast to float64.

Randomness uses the Philox counter-based generator keyed directly with a
64-bit seed, so draws are reproducible across runs and independent of
scheduling order. Sub-seeds for related draws (per layer, per factor) are
derived with ``derive_seed``, never by consuming a shared stream.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DistributionSpec",
    "matmul",
    "mse",
    "frobenius_sq",
    "sample",
    "content_hash",
    "derive_seed",
    "save_wtn1",
    "load_wtn1",
]

_MASK64 = (1 << 64) - 1

# WTN1 on-disk format: magic, version u16 LE, dtype u8, reserved u8,
# rows u64 LE, cols u64 LE, then row-major little-endian payload.
WTN1_MAGIC = b"WTN1"
WTN1_VERSION = 1
_WTN1_HEADER = struct.Struct("<4sHBBQQ")
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 C-contiguous array, rejecting non-finite entries."""
    m = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Deterministic for fixed inputs: numpy's GEMM uses a fixed blocking
    scheme per shape, so repeated calls are bit-identical.
    """
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.ndim != 2 or rhs.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {lhs.shape} and {rhs.shape}")
    if lhs.shape[1] != rhs.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: lhs {lhs.shape} x rhs {rhs.shape}"
        )
    return lhs @ rhs


def mse(x: np.ndarray, y: np.ndarray) -> float:
    """Mean of squared entrywise differences. Zero iff x == y exactly."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.mean(d * d))


def frobenius_sq(x: np.ndarray) -> float:
    """Squared Frobenius norm."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x))


@dataclass(frozen=True)
class DistributionSpec:
    """One of the three initialization distributions used by the toolkit.

    kind "normal" uses (mean, std); the kaiming kinds use fan_in with the
    rectifier-gain convention: kaiming-normal is N(0, 2/fan_in),
    kaiming-uniform is U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    """

    kind: str
    mean: float = 0.0
    std: float | None = None
    fan_in: int | None = None

    def __post_init__(self):
        if self.kind == "normal":
            if self.std is None or not self.std > 0:
                raise ValueError(f"normal requires std > 0, got {self.std}")
        elif self.kind in ("kaiming-normal", "kaiming-uniform"):
            if self.fan_in is None or self.fan_in < 1:
                raise ValueError(f"{self.kind} requires fan_in >= 1, got {self.fan_in}")
        else:
            raise ValueError(f"unknown distribution kind: {self.kind!r}")

    @classmethod
    def normal(cls, mean: float, std: float) -> "DistributionSpec":
        return cls(kind="normal", mean=mean, std=std)

    @classmethod
    def kaiming_normal(cls, fan_in: int) -> "DistributionSpec":
        return cls(kind="kaiming-normal", fan_in=fan_in)

    @classmethod
    def kaiming_uniform(cls, fan_in: int) -> "DistributionSpec":
        return cls(kind="kaiming-uniform", fan_in=fan_in)


def derive_seed(base_seed: int, *labels) -> int:
    """Derive a 64-bit sub-seed from a base seed and a label path.

    SHA-256 over the packed base seed and the UTF-8 labels; stable across
    platforms and independent of call order, so parallel schedules see
    identical draws.
    """
    h = hashlib.sha256()
    h.update(struct.pack("<Q", base_seed & _MASK64))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def sample(spec: DistributionSpec, rows: int, cols: int, seed: int) -> np.ndarray:
    """Draw a rows x cols float64 matrix from `spec`, deterministically per seed."""
    if rows < 1 or cols < 1:
        raise ValueError(f"sample needs rows, cols >= 1, got {rows}x{cols}")
    rng = _generator(seed)
    if spec.kind == "normal":
        return rng.normal(spec.mean, spec.std, size=(rows, cols))
    if spec.kind == "kaiming-normal":
        return rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), size=(rows, cols))
    # kaiming-uniform
    bound = np.sqrt(6.0 / spec.fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


def content_hash(m: np.ndarray) -> str:
    """SHA-256 digest over (rows, cols, dtype code, little-endian payload).

    Shape and storage precision are part of the identity: equal float64
    matrices hash equal, a float32 copy or a transposed shape does not.
    """
    m = np.ascontiguousarray(m)
    if m.ndim != 2:
        raise ValueError(f"content_hash needs a 2-D matrix, got shape {m.shape}")
    code = _DTYPE_CODES.get(m.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"unsupported dtype for hashing: {m.dtype}")
    h = hashlib.sha256()
    h.update(struct.pack("<QQB", m.shape[0], m.shape[1], code))
    h.update(m.astype(_CODE_DTYPES[code], copy=False).tobytes())
    return h.hexdigest()


def save_wtn1(path, m: np.ndarray, dtype: str = "f8") -> Path:
    """Write a matrix as a WTN1 file. dtype "f4" or "f8" selects storage precision."""
    path = Path(path)
    m = as_matrix(m, "tensor")
    code = {"f4": 0, "f8": 1}.get(dtype)
    if code is None:
        raise ValueError(f"dtype must be 'f4' or 'f8', got {dtype!r}")
    payload = m.astype(_CODE_DTYPES[code], copy=False).tobytes()
    header = _WTN1_HEADER.pack(WTN1_MAGIC, WTN1_VERSION, code, 0, m.shape[0], m.shape[1])
    path.write_bytes(header + payload)
    return path


def load_wtn1(path) -> np.ndarray:
    """Read a WTN1 file back as a float64 matrix, validating the exact layout."""
    raw = Path(path).read_bytes()
    if len(raw) < _WTN1_HEADER.size:
        raise ValueError(f"{path}: truncated WTN1 header")
    magic, version, code, reserved, rows, cols = _WTN1_HEADER.unpack_from(raw)
    if magic != WTN1_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != WTN1_VERSION:
        raise ValueError(f"{path}: unsupported WTN1 version {version}")
    if reserved != 0:
        raise ValueError(f"{path}: reserved byte must be 0, got {reserved}")
    dt = _CODE_DTYPES.get(code)
    if dt is None:
        raise ValueError(f"{path}: unknown dtype code {code}")
    expected = _WTN1_HEADER.size + rows * cols * dt.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload size mismatch (expected {expected} bytes, got {len(raw)})"
        )
    data = np.frombuffer(raw, dtype=dt, offset=_WTN1_HEADER.size).reshape(rows, cols)
    return as_matrix(data, str(path))
