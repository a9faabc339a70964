"""Layer forward/backward passes: fully connected, strided 2-D convolution,
and batch normalization, plus the activations they compose with.

Conventions shared by every layer:
  - matrix layers put one sample per COLUMN: X is (features, batch);
  - convolution works on (batch, channels, height, width) stacks;
  - backward receives the gradient w.r.t. the layer OUTPUT and returns the
    gradient w.r.t. the input plus per-parameter gradients that are SUMS
    over the batch (the optimizer divides by the batch size);
  - convolution is true convolution: the kernel is applied with a 180
    degree index flip, not cross-correlation.
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import GeometryError, ShapeError, StateError
from .tensor import add_col, hadamard, matmul, row_reduce, seq_sum


# ---------------------------------------------------------------------------
# activations


class Activation:
    """Elementwise activation with a derivative taken at the pre-activation."""

    KINDS = ("identity", "relu", "sigmoid", "tanh")

    def __init__(self, kind):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}; expected one of {self.KINDS}")
        self.kind = kind

    def apply(self, y):
        if self.kind == "identity":
            return y
        if self.kind == "relu":
            return np.maximum(y, 0)
        if self.kind == "sigmoid":
            return 1.0 / (1.0 + np.exp(-y))
        return np.tanh(y)

    def derivative(self, y):
        # relu'(0) is defined as 0 (strict inequality below)
        if self.kind == "identity":
            return np.ones_like(y)
        if self.kind == "relu":
            return (y > 0).astype(y.dtype)
        if self.kind == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-y))
            return s * (1.0 - s)
        t = np.tanh(y)
        return 1.0 - t * t

    def __repr__(self):
        return f"Activation({self.kind!r})"


def rot180(w):
    """180 degree rotation of a matrix (reverse both axes)."""
    return np.ascontiguousarray(np.asarray(w)[::-1, ::-1])


# ---------------------------------------------------------------------------
# fully connected


class FCLayer:
    """z = f(W x + b), one sample per column."""

    def __init__(self, W, b, act):
        self.W = np.asarray(W)
        self.b = np.asarray(b)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"fc: weights {self.W.shape} vs bias {self.b.shape}")
        self.act = act
        self._X = None
        self._Y = None

    @classmethod
    def initialize(cls, n_in, n_out, act, rng, dtype=np.float64):
        W = (rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))).astype(dtype)
        b = np.zeros(n_out, dtype=dtype)
        return cls(W, b, act)

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def _compute(self, X):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] != self.n_in:
            raise ShapeError(f"fc forward: input {X.shape} vs weights {self.W.shape}")
        Y = add_col(matmul(self.W, X), self.b)
        return Y, self.act.apply(Y)

    def forward(self, X):
        Y, Z = self._compute(X)
        self._X = np.asarray(X)
        self._Y = Y
        return Z

    def infer(self, X):
        return self._compute(X)[1]

    def backward(self, V_out):
        if self._X is None:
            raise StateError("fc backward called before forward")
        V_out = np.asarray(V_out)
        if V_out.shape != self._Y.shape:
            raise ShapeError(f"fc backward: gradient {V_out.shape} vs output {self._Y.shape}")
        V = hadamard(V_out, self.act.derivative(self._Y))
        V_in = matmul(self.W.T, V)
        dW = matmul(V, self._X.T)
        db = row_reduce(V, "sum")
        return V_in, dW, db

    def params(self):
        return {"w": self.W, "b": self.b}

    def flops_forward(self, r):
        m, n = self.W.shape
        return (2 * m * n + 2 * m) * r

    def flops_backward(self, r):
        m, n = self.W.shape
        return (4 * m * n + 2 * m) * r


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvGeometry:
    """Input extents, kernel extents and strides of a 2-D convolution.

    The caller pre-pads the input: (m - k1) must divide by s1 and (n - k2)
    by s2, otherwise the geometry is rejected.
    """

    m: int
    n: int
    k1: int
    k2: int
    s1: int = 1
    s2: int = 1

    def __post_init__(self):
        for name in ("m", "n", "k1", "k2", "s1", "s2"):
            if getattr(self, name) < 1:
                raise GeometryError(f"conv geometry: {name} must be >= 1")
        if self.k1 > self.m or self.k2 > self.n:
            raise GeometryError(
                f"conv geometry: kernel {self.k1}x{self.k2} exceeds input {self.m}x{self.n}")
        if (self.m - self.k1) % self.s1 or (self.n - self.k2) % self.s2:
            raise GeometryError(
                f"conv geometry: input {self.m}x{self.n} minus kernel {self.k1}x{self.k2} "
                f"not divisible by strides {self.s1}x{self.s2}; pad the input")

    @property
    def m_out(self):
        return (self.m - self.k1) // self.s1 + 1

    @property
    def n_out(self):
        return (self.n - self.k2) // self.s2 + 1

    # strided-selection extents, recomputed on demand so they can never go stale
    @property
    def k1_sel(self):
        return (self.k1 - 1) // self.s1 + 1

    @property
    def k2_sel(self):
        return (self.k2 - 1) // self.s2 + 1


def conv2d_single(geom, W, A):
    """Single-channel 2-D convolution of input A with kernel W.

    out[g, h] = sum_{i, j} W[i, j] * A[g*s1 + k1-1-i, h*s2 + k2-1-j]
    (kernel indexed ascending, input descending: true convolution).
    Accumulation is one add per (i, j), ascending, j fastest.
    """
    W = np.asarray(W)
    A = np.asarray(A)
    if W.shape != (geom.k1, geom.k2):
        raise ShapeError(f"conv2d: kernel {W.shape} vs geometry {(geom.k1, geom.k2)}")
    if A.shape != (geom.m, geom.n):
        raise ShapeError(f"conv2d: input {A.shape} vs geometry {(geom.m, geom.n)}")
    mo, no = geom.m_out, geom.n_out
    out = np.zeros((mo, no), dtype=np.result_type(W, A))
    for i in range(geom.k1):
        r0 = geom.k1 - 1 - i
        rows = slice(r0, r0 + (mo - 1) * geom.s1 + 1, geom.s1)
        for j in range(geom.k2):
            c0 = geom.k2 - 1 - j
            cols = slice(c0, c0 + (no - 1) * geom.s2 + 1, geom.s2)
            out += W[i, j] * A[rows, cols]
    return out


def stride_rotate_select(W, s1, s2, row_offset=0, col_offset=0):
    """Select every s1-th row / s2-th column starting at the offsets, then
    rotate the selection 180 degrees.

    The result always has shape (floor((k1-1)/s1)+1, floor((k2-1)/s2)+1);
    slots whose source index falls outside W are zero. Realized purely with
    index arithmetic, no permutation matrices.
    """
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeError(f"stride_rotate_select: expected a matrix, got {W.shape}")
    k1, k2 = W.shape
    k1p = (k1 - 1) // s1 + 1
    k2p = (k2 - 1) // s2 + 1
    out = np.zeros((k1p, k2p), dtype=W.dtype)
    if row_offset < k1 and col_offset < k2:
        sel = W[row_offset::s1, col_offset::s2]
        out[: sel.shape[0], : sel.shape[1]] = sel
    return np.ascontiguousarray(out[::-1, ::-1])


class ConvLayer:
    """Multi-channel strided convolution layer.

    kernels: (out_ch, in_ch, k1, k2), one single-channel kernel per pair;
    bias:    (out_ch, m_out, n_out), a full bias matrix per output channel;
    output channel o is the sum over input channels of single convolutions,
    plus its bias plane, through the activation.
    """

    def __init__(self, kernels, bias, geom, act):
        self.kernels = np.asarray(kernels)
        self.bias = np.asarray(bias)
        self.geom = geom
        self.act = act
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (geom.k1, geom.k2):
            raise ShapeError(f"conv: kernels {self.kernels.shape} vs geometry "
                             f"{(geom.k1, geom.k2)}")
        if self.bias.shape != (self.kernels.shape[0], geom.m_out, geom.n_out):
            raise ShapeError(f"conv: bias {self.bias.shape} vs expected "
                             f"{(self.kernels.shape[0], geom.m_out, geom.n_out)}")
        self._A = None
        self._C = None

    @classmethod
    def initialize(cls, geom, in_ch, out_ch, act, rng, dtype=np.float64):
        fan_in = in_ch * geom.k1 * geom.k2
        kernels = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                             (out_ch, in_ch, geom.k1, geom.k2)).astype(dtype)
        bias = np.zeros((out_ch, geom.m_out, geom.n_out), dtype=dtype)
        return cls(kernels, bias, geom, act)

    @property
    def in_channels(self):
        return self.kernels.shape[1]

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    def _check_input(self, A):
        A = np.asarray(A)
        g = self.geom
        if A.ndim != 4 or A.shape[1:] != (self.in_channels, g.m, g.n):
            raise ShapeError(f"conv forward: input {A.shape} vs expected "
                             f"(r, {self.in_channels}, {g.m}, {g.n})")
        return A

    def _row_slice(self, i):
        g = self.geom
        r0 = g.k1 - 1 - i
        return slice(r0, r0 + (g.m_out - 1) * g.s1 + 1, g.s1)

    def _col_slice(self, j):
        g = self.geom
        c0 = g.k2 - 1 - j
        return slice(c0, c0 + (g.n_out - 1) * g.s2 + 1, g.s2)

    def _compute(self, A):
        A = self._check_input(A)
        g = self.geom
        r = A.shape[0]
        C = np.zeros((r, self.out_channels, g.m_out, g.n_out),
                     dtype=np.result_type(self.kernels, A))
        # accumulate one product per (channel, i, j), ascending, j fastest,
        # matching a scalar triple loop bit for bit
        for c in range(self.in_channels):
            for i in range(g.k1):
                rows = self._row_slice(i)
                for j in range(g.k2):
                    cols = self._col_slice(j)
                    C += self.kernels[None, :, c, i, j, None, None] * A[:, c, None, rows, cols]
        C += self.bias[None, :, :, :]
        return C, self.act.apply(C)

    def forward(self, A):
        C, O = self._compute(A)
        self._A = np.asarray(A)
        self._C = C
        return O

    def infer(self, A):
        return self._compute(A)[1]

    def backward(self, V_out):
        if self._A is None:
            raise StateError("conv backward called before forward")
        V_out = np.asarray(V_out)
        if V_out.shape != self._C.shape:
            raise ShapeError(f"conv backward: gradient {V_out.shape} vs output {self._C.shape}")
        g = self.geom
        A, C = self._A, self._C
        G = hadamard(V_out, self.act.derivative(C))

        # kernel gradient: correlate the batch input with G at every kernel offset
        dK = np.zeros_like(self.kernels)
        for i in range(g.k1):
            rows = self._row_slice(i)
            for j in range(g.k2):
                cols = self._col_slice(j)
                dK[:, :, i, j] = np.einsum("bogh,bcgh->oc", G, A[:, :, rows, cols],
                                           optimize=False)

        dB = seq_sum(G, axis=0)
        V_in = self._input_gradient(G)
        return V_in, dK, dB

    def _input_gradient(self, G):
        """Gradient w.r.t. the input, phase by phase.

        Input rows with the same (row % s1, col % s2) phase read a fixed
        strided selection of the kernel; each phase grid is a stride-1
        convolution of G (embedded with the phase offset) with the
        stride-rotate-selected kernel. Out-of-range source slots are zero.
        """
        g = self.geom
        r = G.shape[0]
        k1p, k2p = g.k1_sel, g.k2_sel
        V_in = np.zeros((r, self.in_channels, g.m, g.n), dtype=G.dtype)
        for p in range(g.s1):
            grid_h = (g.m - 1 - p) // g.s1 + 1          # phase grid height
            sel_h = (g.k1 - 1 - p) // g.s1 + 1          # kernel slots this phase touches
            phi_p = (g.k1 - 1 - p) % g.s1               # kernel row phase
            for q in range(g.s2):
                grid_w = (g.n - 1 - q) // g.s2 + 1
                sel_w = (g.k2 - 1 - q) // g.s2 + 1
                phi_q = (g.k2 - 1 - q) % g.s2

                # (out, in, k1p, k2p) selected-and-rotated kernels for this phase
                sel = np.zeros((self.out_channels, self.in_channels, k1p, k2p), dtype=G.dtype)
                sel[:, :, :sel_h, :sel_w] = self.kernels[:, :, phi_p::g.s1, phi_q::g.s2]
                Kbar = sel[:, :, ::-1, ::-1]

                # embed G so that U[x] = G[x - (k1p - 1) + (k1p - sel_h)]
                U = np.zeros((r, self.out_channels, grid_h + k1p - 1, grid_w + k2p - 1),
                             dtype=G.dtype)
                U[:, :, sel_h - 1 : sel_h - 1 + g.m_out,
                  sel_w - 1 : sel_w - 1 + g.n_out] = G

                acc = np.zeros((r, self.in_channels, grid_h, grid_w), dtype=G.dtype)
                for u in range(k1p):
                    ur = k1p - 1 - u
                    for v in range(k2p):
                        vc = k2p - 1 - v
                        acc += np.einsum(
                            "oc,boxy->bcxy", Kbar[:, :, u, v],
                            U[:, :, ur : ur + grid_h, vc : vc + grid_w], optimize=False)
                V_in[:, :, p :: g.s1, q :: g.s2] = acc
        return V_in

    def params(self):
        return {"w": self.kernels, "b": self.bias}

    def flops_forward(self, r):
        g = self.geom
        per_pair = (2 * g.k1 * g.k2 + 1) * g.m_out * g.n_out
        return (self.out_channels * self.in_channels * per_pair
                + self.out_channels * g.m_out * g.n_out) * r

    def flops_backward(self, r):
        g = self.geom
        per_pair = 2 * g.k1_sel * g.k2_sel * g.m * g.n + 2 * g.k1 * g.k2 * g.m_out * g.n_out
        return self.out_channels * self.in_channels * per_pair * r


# ---------------------------------------------------------------------------
# batch normalization


class BNLayer:
    """Batch normalization over columns: z = w * (x - mean)/std + b per row.

    The standard deviation uses the biased variance plus eps under a square
    root, computed through the scaled, centered cache Y = (X - mean)/sqrt(r)
    so that d_i = sqrt(sum_j Y_ij^2 + eps). Works on the whole batch: unlike
    FC and conv, columns are deliberately coupled.
    """

    def __init__(self, w, b, eps=1e-5, act=None):
        self.w = np.asarray(w)
        self.b = np.asarray(b)
        if self.w.ndim != 1 or self.b.shape != self.w.shape:
            raise ShapeError(f"bn: scale {self.w.shape} vs bias {self.b.shape}")
        if eps <= 0:
            raise ValueError(f"bn: eps must be positive, got {eps}")
        self.eps = float(eps)
        self.act = act if act is not None else Activation("identity")
        self._Y = None
        self._d = None
        self._Xhat = None
        self._Zpre = None

    @classmethod
    def initialize(cls, m, eps=1e-5, act=None, dtype=np.float64):
        return cls(np.ones(m, dtype=dtype), np.zeros(m, dtype=dtype), eps=eps, act=act)

    @property
    def width(self):
        return self.w.shape[0]

    def _compute(self, X):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] != self.width:
            raise ShapeError(f"bn forward: input {X.shape} vs width {self.width}")
        r = X.shape[1]
        sqrt_r = np.sqrt(np.asarray(r, dtype=X.dtype))
        mu = row_reduce(X, "mean")
        Y = (X - mu[:, None]) / sqrt_r
        d = np.sqrt(seq_sum(Y * Y, axis=1) + self.eps)
        Xhat = sqrt_r * (Y / d[:, None])
        Zpre = add_col(self.w[:, None] * Xhat, self.b)
        return Y, d, Xhat, Zpre, self.act.apply(Zpre)

    def forward(self, X):
        Y, d, Xhat, Zpre, Z = self._compute(X)
        self._Y, self._d, self._Xhat, self._Zpre = Y, d, Xhat, Zpre
        return Z

    def infer(self, X):
        return self._compute(X)[4]

    def backward(self, V_out):
        if self._Y is None:
            raise StateError("bn backward called before forward")
        V_out = np.asarray(V_out)
        if V_out.shape != self._Y.shape:
            raise ShapeError(f"bn backward: gradient {V_out.shape} vs batch {self._Y.shape}")
        V = hadamard(V_out, self.act.derivative(self._Zpre))
        Y, d, Xhat = self._Y, self._d, self._Xhat
        r = Y.shape[1]

        # re-centering Y is a no-op by construction (the projector is
        # idempotent) but is kept literal
        Yhat = Y - row_reduce(Y, "mean")[:, None]
        Vhat = V - row_reduce(V, "mean")[:, None]
        u = seq_sum(hadamard(V, Y), axis=1)
        V_in = (self.w / d)[:, None] * (Vhat - (u / (d * d))[:, None] * Yhat)

        dw = seq_sum(hadamard(V, Xhat), axis=1)
        db = row_reduce(V, "sum")
        return V_in, dw, db

    def params(self):
        return {"w": self.w, "b": self.b}

    def flops_forward(self, r):
        return 8 * self.width * r

    def flops_backward(self, r):
        return 12 * self.width * r
