"""Dense tensors with taped reverse-mode differentiation.

A deliberately small operation set, sufficient for MLPs and small
convnets: matmul, bias add, valid 2D convolution (im2col + matmul),
2x2 max pooling, ReLU, flatten, elementwise multiply and softmax
cross-entropy. float32 is the training dtype; the same code runs in
float64, which is how finite-difference verification gets a trustworthy
reference path.

There is no broadcasting beyond the bias add, no strides or padding,
and no implicit dtype promotion: mixed-dtype operands are an error.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite math was required."""


class Tensor:
    """N-dimensional array of reals with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep_f64 = isinstance(data, np.ndarray) and data.dtype == np.float64
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (arr.dtype == np.float32 or keep_f64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(map(str, dtypes))}")


class Tape:
    """Ordered record of executed primitives for reverse-mode replay.

    Ops append one backward closure each; ``backward`` replays them in
    exact reverse execution order, accumulating additively into ``grad``
    buffers. ``check_finite`` validates every op output (slow; meant for
    tests and debugging).
    """

    def __init__(self, check_finite: bool = False):
        self._ops: list = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor, backward) -> None:
        if self.check_finite and not np.isfinite(out.data).all():
            raise NumericError("non-finite value in forward pass")
        out.requires_grad = True
        self._ops.append(backward)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            seed = np.ones_like(root.data)
        _accumulate(root, np.asarray(seed, dtype=root.data.dtype))
        for op in reversed(self._ops):
            op()

    def clear(self) -> None:
        self._ops.clear()


def _wants_grad(tape: Tape | None, *inputs: Tensor) -> bool:
    return tape is not None and any(t.requires_grad for t in inputs)


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product of a (m,k) and b (k,n)."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _wants_grad(tape, a, b):

        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

        tape._record(out, backward)
    return out


def add_bias(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-broadcast add of a length-K bias onto an (N,K) activation."""
    _check_same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes {x.shape} + {b.shape}")
    out = Tensor(x.data + b.data[None, :])
    if _wants_grad(tape, x, b):

        def backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accumulate(x, g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0))

        tape._record(out, backward)
    return out


def ewise_mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Hadamard product of identically shaped tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"ewise_mul shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if _wants_grad(tape, a, b):

        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, g * a.data)

        tape._record(out, backward)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))
    if _wants_grad(tape, x):
        gate = x.data > 0

        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * gate)

        tape._record(out, backward)
    return out


def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Collapse all but the leading (batch) axis, row-major."""
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1).copy())
    if _wants_grad(tape, x):
        shape = x.shape

        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g.reshape(shape))

        tape._record(out, backward)
    return out


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + ho, j : j + wo]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = h - kh + 1, w - kw + 1
    t = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    x = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i : i + ho, j : j + wo] += t[:, :, i, j]
    return x


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation.

    x is (N,C,H,W), kernel (F,C,kh,kw), bias (F,); output is
    (N,F,H-kh+1,W-kw+1). Fast path is im2col + matmul; see
    ``conv2d_reference`` for the obviously-correct loop used as oracle.
    """
    _check_same_dtype(x, kernel, bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d ranks {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c or bias.shape != (f,):
        raise ShapeError(f"conv2d channels {x.shape} vs {kernel.shape} vs {bias.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = _im2col(x.data, kh, kw)
    wmat = kernel.data.reshape(f, -1)
    out_mat = cols @ wmat.T
    out_mat += bias.data[None, :]
    out = Tensor(out_mat.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    if _wants_grad(tape, x, kernel, bias):

        def backward():
            g = out.grad
            if g is None:
                return
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
            if bias.requires_grad:
                _accumulate(bias, gmat.sum(axis=0))
            if kernel.requires_grad:
                _accumulate(kernel, (gmat.T @ cols).reshape(kernel.shape))
            if x.requires_grad:
                _accumulate(x, _col2im(gmat @ wmat, x.shape, kh, kw))

        tape._record(out, backward)
    return out


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Naive six-loop convolution, kept as an independent oracle."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho, wo = h - kh + 1, w - kw + 1
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for ch in range(c):
                        acc = acc + (x[b, ch, i : i + kh, j : j + kw] * kernel[o, ch]).sum()
                    out[b, o, i, j] = acc
    return out


def maxpool2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 max pooling, stride 2; H and W must be even.

    Backward routes the gradient to the argmax position, first
    occurrence in row-major window order on ties.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 rank {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    if _wants_grad(tape, x):

        def backward():
            g = out.grad
            if g is None:
                return
            gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            dx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _accumulate(x, dx)

        tape._record(out, backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean negative log-softmax at the label index, max-stabilized.

    logits is (N,K); labels an integer vector of length N in [0,K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy rank {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    out = Tensor(np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype))
    if _wants_grad(tape, logits):
        softmax = np.exp(logp)

        def backward():
            g = out.grad
            if g is None:
                return
            d = softmax.copy()
            d[rows, labels] -= 1
            _accumulate(logits, d * (g / n))

        tape._record(out, backward)
    return out


def l1_value_and_subgrad(c: Tensor) -> tuple[float, Tensor]:
    """Sum of absolute values and its elementwise subgradient sign(c).

    sign(0) is 0. The value accumulates in float64 regardless of the
    tensor dtype.
    """
    value = float(np.abs(c.data).sum(dtype=np.float64))
    return value, Tensor(np.sign(c.data))
