"""Minimal dense-tensor autodiff core.

Implements exactly the operations the motion predictor needs: strided 2D
convolution, affine maps, leaky ReLU, inverted dropout, elementwise
arithmetic, reductions, concat/stack/slice plumbing, and reverse-mode
differentiation driven by an explicit gradient tape.

Tensors are immutable values during a taped computation; parameter updates
happen between passes via ``Tensor.assign_``. A ``GradTape`` is single-owner:
one forward/backward pass at a time per tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand ranks or extents do not line up."""


class GradCheckSetupError(RuntimeError):
    """Raised when the function under finite-difference test is not deterministic."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assign_(self, new_data: np.ndarray) -> None:
        """In-place value update for leaf parameters, between tape passes only."""
        new_data = np.asarray(new_data, dtype=self.data.dtype)
        if new_data.shape != self.data.shape:
            raise ShapeError(
                f"assign_ expects shape {self.data.shape}, got {new_data.shape}"
            )
        self.data = new_data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; tensor-tensor ops demand exact shape equality
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, key):
        return tslice(self, key)


@dataclass
class TapeNode:
    """One executed primitive: saved operands, output, and its vector-Jacobian product."""

    inputs: tuple
    output: "Tensor"
    vjp: Callable[[np.ndarray], tuple]
    input_shapes: tuple = field(default=())

    def __post_init__(self):
        self.input_shapes = tuple(t.data.shape for t in self.inputs)


class GradTape:
    """Ordered record of primitive operations executed while the tape is active."""

    def __init__(self):
        self._nodes: list[TapeNode] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, inputs: tuple, output: Tensor, vjp) -> None:
        self._nodes.append(TapeNode(inputs, output, vjp))


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs, out, vjp):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, vjp)


def backward(loss: Tensor, tape: GradTape) -> dict:
    """Reverse-replay the tape, returning ``{tensor: gradient}`` for every
    gradient-requiring tensor reachable from ``loss``.

    Deterministic: accumulation follows exact reverse execution order.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g_out = grads.get(node.output)
        if g_out is None:
            continue
        partials = node.vjp(g_out)
        for tensor, shape, g in zip(node.inputs, node.input_shapes, partials):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != shape:
                raise ShapeError(
                    f"vjp produced gradient of shape {g.shape} for input of shape {shape}"
                )
            acc = grads.get(tensor)
            grads[tensor] = g if acc is None else acc + g
    grads.pop(loss, None)
    return grads


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def uniform(rng: np.random.Generator, low, high, shape, requires_grad=False,
            dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (no silent broadcasting between tensors)
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b, requires_grad=a.requires_grad)
        _record((a,), out, lambda g: (g,))
        return out
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    _record((a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data - b, requires_grad=a.requires_grad)
        _record((a,), out, lambda g: (g,))
        return out
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)
    _record((a, b), out, lambda g: (g, -g))
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s, requires_grad=a.requires_grad)
        _record((a,), out, lambda g: (g * s,))
        return out
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data
    _record((a, b), out, lambda g: (g * bd, g * ad))
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, requires_grad=x.requires_grad)
    xd = x.data
    _record((x,), out, lambda g: (2.0 * xd * g,))
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype),
                 requires_grad=x.requires_grad)
    shape, dtype = x.data.shape, x.data.dtype
    _record((x,), out, lambda g: (np.full(shape, g, dtype=dtype),))
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype),
                 requires_grad=x.requires_grad)
    shape, dtype = x.data.shape, x.data.dtype
    _record((x,), out, lambda g: (np.full(shape, g / n, dtype=dtype),))
    return out


def sumsq(x: Tensor) -> Tensor:
    """Sum of squared entries; the building block of the weight penalty."""
    out = Tensor(np.asarray(np.square(x.data).sum(), dtype=x.data.dtype),
                 requires_grad=x.requires_grad)
    xd = x.data
    _record((x,), out, lambda g: (2.0 * g * xd,))
    return out


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xd = x.data
    out = Tensor(np.where(xd >= 0, xd, slope * xd), requires_grad=x.requires_grad)
    if out.requires_grad:
        _record((x,), out, lambda g: (np.where(xd >= 0, g, slope * g),))
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (g * y * (1.0 - y),))
    return out


def tlog(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.log(xd), requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (g / xd,))
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    out = Tensor(np.clip(xd, lo, hi), requires_grad=x.requires_grad)
    if out.requires_grad:
        passthrough = (xd >= lo) & (xd <= hi)
        _record((x,), out, lambda g: (np.where(passthrough, g, 0.0),))
    return out


def dropout(x: Tensor, p: float, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train-time zeroing with 1/(1-p) rescale, eval identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an explicit rng")
    keep = (rng.random(x.data.shape) >= p)
    scale = 1.0 / (1.0 - p)
    factor = keep * scale
    out = Tensor(x.data * factor, requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (g * factor,))
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data
    _record((a, b), out, lambda g: (g @ bd.T, ad.T @ g))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: ``x @ weight.T + bias`` with weight ``[out, in]``."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects a 2-D input, got {x.data.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(
            f"linear: bias {bias.data.shape} incompatible with weight {weight.data.shape}"
        )
    out_data = x.data @ weight.data.T + bias.data
    req = x.requires_grad or weight.requires_grad or bias.requires_grad
    out = Tensor(out_data, requires_grad=req)
    xd, wd = x.data, weight.data
    _record((x, weight, bias), out,
            lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))
    return out


# ---------------------------------------------------------------------------
# 2D convolution (explicit zero padding, per-axis stride)
# ---------------------------------------------------------------------------


def conv2d_output_shape(in_hw, k_hw, stride, padding):
    (H, W), (kH, kW), (sH, sW), (pH, pW) = in_hw, k_hw, stride, padding
    return ((H + 2 * pH - kH) // sH + 1, (W + 2 * pW - kW) // sW + 1)


def _conv_windows(xp: np.ndarray, kH: int, kW: int, sH: int, sW: int,
                  Ho: int, Wo: int) -> np.ndarray:
    sN, sC, sh, sw = xp.strides
    return as_strided(
        xp,
        (xp.shape[0], xp.shape[1], kH, kW, Ho, Wo),
        (sN, sC, sh, sw, sh * sH, sw * sW),
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Strided 2D cross-correlation with zero padding.

    ``x`` is ``[N, Cin, H, W]``, ``kernel`` is ``[Cout, Cin, kH, kW]``,
    ``bias`` is ``[Cout]``; output is ``[N, Cout, H', W']`` with
    ``H' = floor((H + 2*pH - kH)/sH) + 1`` and likewise for ``W'``.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {xd.shape} and {kd.shape}"
        )
    N, Cin, H, W = xd.shape
    Cout, kCin, kH, kW = kd.shape
    if kCin != Cin:
        raise ShapeError(
            f"conv2d: input has {Cin} channels but kernel expects {kCin} "
            f"(input {xd.shape}, kernel {kd.shape})"
        )
    if bias.data.shape != (Cout,):
        raise ShapeError(f"conv2d: bias {bias.data.shape} must be ({Cout},)")
    sH, sW = stride
    pH, pW = padding
    if sH < 1 or sW < 1:
        raise ValueError(f"conv2d: stride components must be >= 1, got {stride}")
    if kH > H + 2 * pH or kW > W + 2 * pW:
        raise ShapeError(
            f"conv2d: kernel ({kH}, {kW}) exceeds padded input "
            f"({H + 2 * pH}, {W + 2 * pW})"
        )
    Ho = (H + 2 * pH - kH) // sH + 1
    Wo = (W + 2 * pW - kW) // sW + 1
    if pH or pW:
        xp = np.zeros((N, Cin, H + 2 * pH, W + 2 * pW), dtype=xd.dtype)
        xp[:, :, pH:pH + H, pW:pW + W] = xd
    else:
        xp = xd
    win = _conv_windows(xp, kH, kW, sH, sW, Ho, Wo)
    out_data = np.tensordot(kd, win, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    out_data = np.ascontiguousarray(out_data)
    out_data += bias.data.reshape(1, Cout, 1, 1)
    req = x.requires_grad or kernel.requires_grad or bias.requires_grad
    out = Tensor(out_data, requires_grad=req)
    if not out.requires_grad or _active_tape() is None:
        return out

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3))
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5]))
        t = np.tensordot(g, kd, axes=(1, 0))  # [N, Ho, Wo, Cin, kH, kW]
        canvas = np.zeros_like(xp)
        for i in range(kH):
            for j in range(kW):
                canvas[:, :, i:i + sH * Ho:sH, j:j + sW * Wo:sW] += \
                    t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = canvas[:, :, pH:pH + H, pW:pW + W] if (pH or pW) else canvas
        return gx, gk, gb

    _record((x, kernel, bias), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    orig = x.data.shape
    _record((x,), out, lambda g: (g.reshape(orig),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    rank = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError(
                f"concat: rank mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=req)
    if out.requires_grad and _active_tape() is not None:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

        _record(tensors, out, vjp)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("stack requires at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != base:
            raise ShapeError(f"stack: shapes {base} and {t.data.shape} differ")
    out_data = np.stack([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=req)
    if out.requires_grad and _active_tape() is not None:
        def vjp(g):
            moved = np.moveaxis(g, axis, 0)
            return tuple(np.ascontiguousarray(moved[i]) for i in range(len(tensors)))

        _record(tensors, out, vjp)
    return out


def tslice(x: Tensor, key) -> Tensor:
    """Basic (non-advanced) indexing with gradient scatter on the way back."""
    out_data = x.data[key]
    out = Tensor(out_data, requires_grad=x.requires_grad)
    if out.requires_grad and _active_tape() is not None:
        shape, dtype = x.data.shape, x.data.dtype

        def vjp(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[key] = g
            return (gx,)

        _record((x,), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    shape: tuple
    max_rel_err: float
    worst_index: tuple
    analytic_at_worst: float
    numeric_at_worst: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list:
        return [e for e in self.entries if not e.ok(self.tol)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"{e.name:<32s} max_rel_err={e.max_rel_err:.3e} "
            f"{'ok' if e.ok(self.tol) else 'FAIL'}"
            for e in self.entries
        ]
        lines.append(
            f"overall max_rel_err={self.max_rel_err:.3e} tol={self.tol:g} "
            f"{'PASS' if self.passed else 'FAIL'}"
        )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments, reads the given parameters, and must be
    deterministic (any dropout mask must be re-drawn identically on every
    call); nondeterminism is detected by double evaluation and raises
    ``GradCheckSetupError``. ``params`` is a ``{name: Tensor}`` mapping or an
    iterable of ``(name, Tensor)`` pairs.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = list(params)

    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise GradCheckSetupError(
            f"function under test is not deterministic: {v1!r} != {v2!r} "
            "(is a dropout mask being resampled between evaluations?)"
        )

    with GradTape() as tape:
        loss = f()
    grads = backward(loss, tape)

    entries = []
    for name, p in named:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = (0.0, (0,), 0.0, 0.0)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = f().item()
            flat[idx] = orig - h
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            err = relative_error(a, numeric)
            if err >= worst[0]:
                worst = (err, np.unravel_index(idx, p.data.shape), a, numeric)
        entries.append(GradCheckEntry(name, p.data.shape, worst[0], worst[1],
                                      worst[2], worst[3]))
    return GradCheckReport(entries, tol)
