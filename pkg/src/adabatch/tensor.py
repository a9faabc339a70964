"""Dense array primitives with a fixed, reproducible summation order.

Arrays are plain numpy ndarrays (row-major, float64 by default, float32
selectable for training runs). Every reduction here accumulates in
ascending index order, never pairwise, so two runs over the same inputs
are bitwise identical and each output column of a matrix product depends
only on the matching input column.
"""

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64

_DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name):
    if name not in _DTYPES:
        raise ShapeError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    return _DTYPES[name]


class Rng:
    """Seeded PCG64 stream; identical seed gives an identical stream everywhere."""

    def __init__(self, seed):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def permutation(self, n):
        return self.gen.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def spawn(self, key):
        """Derive an independent child stream; key keeps siblings distinct."""
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1)[0])

    def get_state(self):
        st = self.gen.bit_generator.state
        return {
            "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, st):
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(st["state"]), "inc": int(st["inc"])},
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }


def seq_sum(a, axis):
    """Sum along one axis as an ascending left fold (no pairwise tree)."""
    a = np.asarray(a)
    if a.shape[axis] == 0:
        return np.zeros(a.shape[:axis] + a.shape[axis + 1:], dtype=a.dtype)
    # cumsum is a sequential scan, so its last slice is the ascending fold
    return np.cumsum(a, axis=axis).take(-1, axis=axis)


def matmul(a, b):
    """Dense product with the k loop ascending, one add per k.

    Column j of the result is computed by exactly the operation sequence
    that matmul(a, b[:, j:j+1]) performs, so slicing commutes bitwise.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for kk in range(k):
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return out


def hadamard(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b


def row_reduce(a, kind="sum"):
    """Per-row sum or mean of a matrix, accumulated in ascending column order."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"row_reduce: expected a matrix, got shape {a.shape}")
    if kind not in ("sum", "mean"):
        raise ValueError(f"row_reduce: kind must be 'sum' or 'mean', got {kind!r}")
    s = seq_sum(a, axis=1)
    if kind == "mean":
        return s / a.shape[1]
    return s


def add_col(a, v):
    """Add a column vector to every column of a matrix."""
    a = np.asarray(a)
    v = np.asarray(v)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise ShapeError(f"add_col: matrix {a.shape} vs column {v.shape}")
    return a + v[:, None]


def add_channel_bias(batch, bias):
    """Add a per-channel bias plane to every sample of a (r, ch, h, w) stack."""
    batch = np.asarray(batch)
    bias = np.asarray(bias)
    if batch.ndim != 4 or bias.shape != batch.shape[1:]:
        raise ShapeError(f"add_channel_bias: batch {batch.shape} vs bias {bias.shape}")
    return batch + bias[None, :, :, :]
