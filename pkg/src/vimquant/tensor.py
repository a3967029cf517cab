"""Dense tensor carrier shared by every module, plus the QTEN file format.

Tensors are immutable after construction: the backing numpy buffer is marked
read-only and every operation returns a new tensor. The dtype is one of
F32 / I8 / I32 and the layout is always row-major (C order).

QTEN binary layout (little-endian, no padding, no compression):

    offset  size      field
    0       4         magic b"QTEN"
    4       4         u32 version (currently 1)
    8       1         u8 dtype code (0=F32, 1=I8, 2=I32)
    9       1         u8 ndim
    10      4 * ndim  u32 dims
    ...     rest      raw element data
"""

from __future__ import annotations

import struct
from enum import Enum
from pathlib import Path

import numpy as np

MAGIC = b"QTEN"
FORMAT_VERSION = 1


class DType(Enum):
    F32 = 0
    I8 = 1
    I32 = 2

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(_NUMPY_NAME[self])


_NUMPY_NAME = {DType.F32: "float32", DType.I8: "int8", DType.I32: "int32"}
_DTYPE_BY_CODE = {d.value: d for d in DType}
_INT_BOUNDS = {DType.I8: (-128, 127), DType.I32: (-(2**31), 2**31 - 1)}


class TensorError(ValueError):
    """Base class for tensor-core failures."""


class ShapeMismatchError(TensorError):
    pass


class DivideByZeroError(TensorError):
    pass


class QtenError(TensorError):
    """Base class for QTEN file-format failures."""


class BadMagicError(QtenError):
    pass


class UnsupportedVersionError(QtenError):
    pass


class TruncatedPayloadError(QtenError):
    pass


class DimMismatchError(QtenError):
    pass


def _infer_dtype(arr: np.ndarray) -> DType:
    if np.issubdtype(arr.dtype, np.floating):
        return DType.F32
    if arr.dtype == np.int8:
        return DType.I8
    if np.issubdtype(arr.dtype, np.integer):
        return DType.I32
    raise TensorError(f"unsupported source dtype {arr.dtype}")


class Tensor:
    """Immutable dense row-major array with dtype in {F32, I8, I32}."""

    __slots__ = ("_data", "dtype")

    def __init__(self, data, dtype: DType | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = _infer_dtype(arr)
        target = dtype.np_dtype
        if arr.dtype != target:
            if dtype in _INT_BOUNDS:
                if not np.issubdtype(arr.dtype, np.integer):
                    raise TensorError(
                        f"cannot build {dtype.name} tensor from {arr.dtype} data"
                    )
                lo, hi = _INT_BOUNDS[dtype]
                if arr.size and (int(arr.min()) < lo or int(arr.max()) > hi):
                    raise TensorError(
                        f"{dtype.name} values must lie in [{lo}, {hi}]"
                    )
            arr = arr.astype(target)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise TensorError(f"every dim must be >= 1, got dims {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr
        self.dtype = dtype

    @property
    def dims(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the flat row-major buffer, shaped."""
        return self._data

    @property
    def size(self) -> int:
        return self._data.size

    @classmethod
    def zeros(cls, dims, dtype: DType = DType.F32) -> "Tensor":
        return cls(np.zeros(dims, dtype=dtype.np_dtype), dtype)

    @classmethod
    def ones(cls, dims, dtype: DType = DType.F32) -> "Tensor":
        return cls(np.ones(dims, dtype=dtype.np_dtype), dtype)

    def tolist(self):
        return self._data.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype is other.dtype
            and self.dims == other.dims
            and bool(np.array_equal(self._data, other._data))
        )

    def __hash__(self):
        return hash((self.dtype, self.dims, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype.name})"


_BINARY_OPS = {
    "add": np.add,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
}


def _broadcast_operand(a: Tensor, b, axis: int | None) -> np.ndarray:
    if isinstance(b, (int, float, np.integer, np.floating)):
        return np.float32(b)
    if not isinstance(b, Tensor):
        raise TensorError(f"second operand must be a Tensor or scalar, got {type(b)!r}")
    if b.dtype is not DType.F32:
        raise TensorError("elementwise ops are defined on F32 tensors only")
    if b.dims == a.dims:
        return b.data
    if axis is not None and len(b.dims) == 1 and b.dims[0] == a.dims[axis]:
        shape = [1] * len(a.dims)
        shape[axis] = b.dims[0]
        return b.data.reshape(shape)
    raise ShapeMismatchError(
        f"operand shapes {a.dims} and {b.dims} do not match"
        + ("" if axis is None else f" along axis {axis}")
    )


def elementwise(op: str, a: Tensor, b=None, axis: int | None = None) -> Tensor:
    """Elementwise arithmetic on F32 tensors.

    `b` may be a scalar, a same-shape tensor, or (with `axis`) a 1-D tensor
    broadcast along the named axis of `a`. General broadcasting is rejected.
    """
    if a.dtype is not DType.F32:
        raise TensorError("elementwise ops are defined on F32 tensors only")
    if op == "exp":
        if b is not None:
            raise TensorError("exp takes no second operand")
        return Tensor(np.exp(a.data), DType.F32)
    if op not in _BINARY_OPS:
        raise TensorError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TensorError(f"elementwise {op!r} requires a second operand")
    arr_b = _broadcast_operand(a, b, axis)
    if op == "div" and bool(np.any(arr_b == 0.0)):
        raise DivideByZeroError("division by a zero divisor element")
    out = _BINARY_OPS[op](a.data, arr_b, dtype=np.float32)
    return Tensor(out, DType.F32)


def contract_last(vec: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Sum-product of `vec` against the last axis of `mat`.

    Accumulates in float64 with a fixed left-to-right order so the result is
    bit-reproducible across runs; the output is cast back to float32.
    """
    acc = np.zeros(mat.shape[:-1], dtype=np.float64)
    for i in range(vec.shape[0]):
        acc += np.float64(vec[i]) * mat[..., i]
    return acc.astype(np.float32)


def contract(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Contract 1-D `a` against the given axis of `b` (default: last)."""
    if a.dtype is not DType.F32 or b.dtype is not DType.F32:
        raise TensorError("contract is defined on F32 tensors only")
    if len(a.dims) != 1:
        raise TensorError(f"first operand must be 1-D, got dims {a.dims}")
    ax = axis % len(b.dims)
    if a.dims[0] != b.dims[ax]:
        raise ShapeMismatchError(
            f"contracted axis length {a.dims[0]} != {b.dims[ax]} "
            f"(shapes {a.dims} and {b.dims}, axis {ax})"
        )
    moved = np.moveaxis(b.data, ax, -1)
    out = contract_last(a.data, moved)
    if out.ndim == 0:
        out = out.reshape(1)
    return Tensor(out, DType.F32)


def matmul_f32(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """float32 matmul with float64 accumulation (shared numeric policy)."""
    return (w.astype(np.float64) @ x.astype(np.float64)).astype(np.float32)


def tensor_to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<IBB", FORMAT_VERSION, t.dtype.value, len(t.dims))
    dims = struct.pack(f"<{len(t.dims)}I", *t.dims)
    payload = t.data.astype(t.dtype.np_dtype.newbyteorder("<"), copy=False).tobytes()
    return header + dims + payload


def tensor_from_bytes(raw: bytes) -> Tensor:
    if len(raw) < 4:
        raise TruncatedPayloadError("file shorter than the 4-byte magic")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise TruncatedPayloadError("file shorter than the 10-byte header")
    version, code, ndim = struct.unpack("<IBB", raw[4:10])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise QtenError(f"unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]
    if ndim == 0:
        raise DimMismatchError("ndim must be >= 1")
    end = 10 + 4 * ndim
    if len(raw) < end:
        raise TruncatedPayloadError("file ends inside the dims table")
    dims = struct.unpack(f"<{ndim}I", raw[10:end])
    if any(d == 0 for d in dims):
        raise DimMismatchError(f"every dim must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.np_dtype.itemsize
    got = len(raw) - end
    if got < expected:
        raise TruncatedPayloadError(f"payload has {got} bytes, expected {expected}")
    if got > expected:
        raise DimMismatchError(
            f"payload has {got} bytes but dims {dims} require {expected}"
        )
    arr = np.frombuffer(raw[end:], dtype=dtype.np_dtype.newbyteorder("<"))
    arr = arr.astype(dtype.np_dtype).reshape(dims)
    return Tensor(arr, dtype)


def write_qten(t: Tensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_qten(path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
