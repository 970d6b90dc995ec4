"""Dense float tensors with reverse-mode autodiff on an explicit tape.

All differentiable math in the package flows through the ops in this module,
so a :class:`Tape` sees a complete record of the forward pass. Ops execute
eagerly, check that their outputs are finite, and register a backward rule on
the innermost active tape. With no tape active the same ops run as plain
inference at lower cost.

Layout is row-major and contiguous. Broadcasting is deliberately limited to
bias-style patterns (vector against matrix rows or columns) so every backward
rule stays auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ConfigError",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "Tape",
    "FlopCounter",
    "add",
    "add_flops",
    "concat_cols",
    "cross_entropy_logits",
    "depthwise_conv2d",
    "edge_gather_mean",
    "extract_patches",
    "gelu",
    "grid_to_tokens",
    "layer_norm",
    "matmul",
    "mean_rows",
    "mul",
    "neg",
    "node_scatter_mean",
    "pad_spatial",
    "reshape",
    "scale",
    "slice_cols",
    "softmax_rows",
    "sum_all",
    "tokens_to_grid",
    "transpose",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigError(ValueError):
    """Invalid structural configuration (sizes, kernels, tags, files)."""


class NumericalError(ArithmeticError):
    """A forward op produced NaN/Inf, or a numerical gate failed."""


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """Dense row-major float32/float64 array, optionally tracked for autodiff.

    ``grad`` accumulates across backward passes until :meth:`zero_grad` (or
    :func:`zero_grads`) resets it. Tensors produced by ops are treated as
    immutable; parameter updates happen between steps by rebinding ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        """The raw value buffer, outside any gradient bookkeeping."""
        return self.data

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# tape


class _TLS(threading.local):
    def __init__(self):
        self.tapes: list["Tape"] = []
        self.flops: list["FlopCounter"] = []


_tls = _TLS()


class Tape:
    """Execution-ordered record of ops; backward replays it exactly once, in reverse.

    Because records append in execution order, every op's inputs were produced
    earlier on the tape, which is the topological order backward relies on.
    Tapes nest per-thread; independent tapes may run in parallel threads as
    long as shared parameters are only read.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _tls.tapes.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _tls.tapes.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def active() -> "Tape | None":
        stack = _tls.tapes
        return stack[-1] if stack else None

    def _record(self, out: Tensor, backward: Callable) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor, into: dict[int, tuple[Tensor, np.ndarray]] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) for every recorded leaf that requires grad.

        Repeated calls without a reset add on top of existing gradients. When
        ``into`` is given, leaf gradients are collected there (keyed by tensor
        id) instead of being written to ``Tensor.grad``, which keeps parallel
        backward passes over shared parameters race-free.
        """
        if loss.size != 1:
            raise NumericalError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _ in self._records}
        grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}

        def accum(t: Tensor, g: np.ndarray) -> None:
            slot = grads.get(id(t))
            if slot is None:
                grads[id(t)] = [t, g]
            else:
                slot[1] = slot[1] + g

        for out, bwd in reversed(self._records):
            slot = grads.pop(id(out), None)
            if slot is None:
                continue
            bwd(np.asarray(slot[1]), accum)

        for key, (t, g) in grads.items():
            if key in produced or not t.requires_grad:
                continue
            g = np.asarray(g).reshape(t.data.shape)
            if into is not None:
                slot = into.get(key)
                if slot is None:
                    into[key] = (t, g)
                else:
                    into[key] = (t, slot[1] + g)
            else:
                t.grad = g if t.grad is None else t.grad + g


class FlopCounter:
    """Counts floating-point work of ops executed while active (nestable)."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        _tls.flops.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _tls.flops.pop()
        assert popped is self
        return False


def add_flops(n: int) -> None:
    counters = _tls.flops
    if counters:
        for c in counters:
            c.total += n


def _finite(data: np.ndarray) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericalError("forward op produced non-finite values")
    return data


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(_finite(data))
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.active()
    if tape is not None and out.requires_grad:
        tape._record(out, backward)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-d operands. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    add_flops(2 * m * k * n)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g @ b.data.T)
        if b.requires_grad:
            accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def _broadcast_ok(a_shape, b_shape) -> bool:
    if a_shape == b_shape:
        return True
    if len(a_shape) == 2:
        m, n = a_shape
        return b_shape in ((n,), (1, n), (m, 1))
    return False


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row/column vector against a 2-d ``a``."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    add_flops(a.size)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g)
        if b.requires_grad:
            accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    add_flops(a.size)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g * b.data)
        if b.requires_grad:
            accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    add_flops(a.size)

    def bwd(g, accum):
        accum(a, g * s)

    return _make(a.data * s, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum of all entries."""
    add_flops(a.size)

    def bwd(g, accum):
        accum(a, np.full_like(a.data, np.asarray(g).item()))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean of a 2-d tensor, kept as a ``(1, n)`` row."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects 2-d input, got {a.shape}")
    m = a.shape[0]
    add_flops(a.size)

    def bwd(g, accum):
        accum(a, np.broadcast_to(g / m, a.data.shape))

    return _make(a.data.mean(axis=0, keepdims=True), (a,), bwd)


# --------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-d input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    add_flops(5 * x.size)

    def bwd(g, accum):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            accum(x, y * (g - dot))

    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-d input, got {x.shape}")
    n = x.shape[1]
    if gamma.data.reshape(-1).shape != (n,) or beta.data.reshape(-1).shape != (n,):
        raise ShapeError(f"layer_norm affine params must have {n} entries")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):  # eps=0 on a constant row fails the finite check instead
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
    g1 = gamma.data.reshape(1, n)
    y = xhat * g1 + beta.data.reshape(1, n)
    add_flops(8 * x.size)

    def bwd(g, accum):
        if beta.requires_grad:
            accum(beta, _reduce_to(g.sum(axis=0), beta.data.shape))
        if gamma.requires_grad:
            accum(gamma, _reduce_to((g * xhat).sum(axis=0), gamma.data.shape))
        if x.requires_grad:
            dxhat = g * g1
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(y, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GELU: ``x * Phi(x)``."""
    phi = 0.5 * (1.0 + erf(x.data * x.data.dtype.type(_INV_SQRT2)))
    add_flops(6 * x.size)

    def bwd(g, accum):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            accum(x, g * (phi + x.data * pdf))

    return _make(x.data * phi, (x,), bwd)


# --------------------------------------------------------------------------
# layout


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-d input, got {a.shape}")

    def bwd(g, accum):
        accum(a, g.T)

    return _make(a.data.T, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g, accum):
        accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"bad column slice [{lo}:{hi}] for shape {a.shape}")

    def bwd(g, accum):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        accum(a, full)

    return _make(a.data[:, lo:hi], (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g, accum):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                accum(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def tokens_to_grid(t: Tensor, grid: tuple[int, int]) -> Tensor:
    """``(N, C)`` row-major tokens -> ``(C, H, W)`` feature map."""
    h, w = grid
    n, c = t.shape
    if h * w != n:
        raise ShapeError(f"grid {grid} does not cover {n} tokens")

    def bwd(g, accum):
        accum(t, g.reshape(c, n).T)

    return _make(t.data.T.reshape(c, h, w), (t,), bwd)


def grid_to_tokens(x: Tensor) -> Tensor:
    """``(C, H, W)`` feature map -> ``(N, C)`` row-major tokens."""
    if x.data.ndim != 3:
        raise ShapeError(f"grid_to_tokens expects 3-d input, got {x.shape}")
    c, h, w = x.shape

    def bwd(g, accum):
        accum(x, g.T.reshape(c, h, w))

    return _make(x.data.reshape(c, h * w).T, (x,), bwd)


# --------------------------------------------------------------------------
# convolution / patching


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 correlation with zero padding 1, same spatial shape."""
    if x.data.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects (C,H,W) input, got {x.shape}")
    c, h, w = x.shape
    if kernel.shape != (c, 3, 3):
        raise ConfigError(f"depthwise kernel must be ({c},3,3), got {kernel.shape}")
    pad = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    y = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            y += kernel.data[:, i, j, None, None] * pad[:, i : i + h, j : j + w]
    if bias is not None:
        y = y + bias.data.reshape(c, 1, 1)
    add_flops(18 * x.size)

    def bwd(g, accum):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(3):
                for j in range(3):
                    dk[:, i, j] = (g * pad[:, i : i + h, j : j + w]).sum(axis=(1, 2))
            accum(kernel, dk)
        if bias is not None and bias.requires_grad:
            accum(bias, _reduce_to(g.sum(axis=(1, 2)), bias.data.shape))
        if x.requires_grad:
            dpad = np.zeros_like(pad)
            for i in range(3):
                for j in range(3):
                    dpad[:, i : i + h, j : j + w] += kernel.data[:, i, j, None, None] * g
            accum(x, dpad[:, 1 : 1 + h, 1 : 1 + w])

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, inputs, bwd)


def pad_spatial(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Zero-pad the bottom/right of a ``(C,H,W)`` map up to ``(C,h_out,w_out)``."""
    if x.data.ndim != 3:
        raise ShapeError(f"pad_spatial expects (C,H,W) input, got {x.shape}")
    c, h, w = x.shape
    if h_out < h or w_out < w:
        raise ShapeError(f"cannot pad {x.shape} down to ({h_out},{w_out})")
    if h_out == h and w_out == w:
        return x

    def bwd(g, accum):
        accum(x, g[:, :h, :w])

    return _make(np.pad(x.data, ((0, 0), (0, h_out - h), (0, w_out - w))), (x,), bwd)


def extract_patches(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping ``stride x stride`` patches of a ``(C,H,W)`` map.

    Rows are patches in row-major grid order; each row is the flattened
    ``C*stride*stride`` patch content. Pure data movement.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"extract_patches expects (C,H,W) input, got {x.shape}")
    c, h, w = x.shape
    if stride < 1 or h % stride or w % stride:
        raise ConfigError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    hs, ws = h // stride, w // stride
    y = (
        x.data.reshape(c, hs, stride, ws, stride)
        .transpose(1, 3, 0, 2, 4)
        .reshape(hs * ws, c * stride * stride)
    )

    def bwd(g, accum):
        accum(
            x,
            g.reshape(hs, ws, c, stride, stride).transpose(2, 0, 3, 1, 4).reshape(c, h, w),
        )

    return _make(y, (x,), bwd)


# --------------------------------------------------------------------------
# hypergraph gather / scatter


def edge_gather_mean(v: Tensor, members: np.ndarray) -> Tensor:
    """Mean of ``v`` rows per hyperedge: ``members`` is ``(Ne, K)`` node indices."""
    if v.data.ndim != 2:
        raise ShapeError(f"edge_gather_mean expects 2-d tokens, got {v.shape}")
    ne, k = members.shape
    add_flops(ne * k * v.shape[1])

    def bwd(g, accum):
        if v.requires_grad:
            dv = np.zeros_like(v.data)
            np.add.at(dv, members.ravel(), np.repeat(g / k, k, axis=0))
            accum(v, dv)

    return _make(v.data[members].mean(axis=1), (v,), bwd)


def node_scatter_mean(
    e: Tensor,
    node_ids: np.ndarray,
    edge_ids: np.ndarray,
    node_degree: np.ndarray,
    n_nodes: int,
) -> Tensor:
    """Mean of incident hyperedge rows per node; zero-degree nodes get zeros.

    ``node_ids`` / ``edge_ids`` are the flattened incidence pairs; the inverse
    degree of a zero-degree node is taken as 0 (pseudo-inverse convention).
    """
    if e.data.ndim != 2:
        raise ShapeError(f"node_scatter_mean expects 2-d edge tokens, got {e.shape}")
    denom = np.maximum(node_degree, 1).astype(e.data.dtype)
    out = np.zeros((n_nodes, e.shape[1]), dtype=e.data.dtype)
    np.add.at(out, node_ids, e.data[edge_ids])
    out /= denom[:, None]
    add_flops(node_ids.size * e.shape[1])

    def bwd(g, accum):
        if e.requires_grad:
            de = np.zeros_like(e.data)
            np.add.at(de, edge_ids, g[node_ids] / denom[node_ids, None])
            accum(e, de)

    return _make(out, (e,), bwd)


# --------------------------------------------------------------------------
# loss


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """Stable cross-entropy of a single logit row against an integer label."""
    z = logits.data.reshape(-1)
    n = z.shape[0]
    if not 0 <= target < n:
        raise ConfigError(f"target {target} out of range for {n} classes")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    add_flops(4 * n)

    def bwd(g, accum):
        if logits.requires_grad:
            p = np.exp(z - lse)
            p[target] -= 1.0
            accum(logits, (np.asarray(g).item() * p).reshape(logits.data.shape))

    return _make(np.asarray(lse - z[target]), (logits,), bwd)
