"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The operation vocabulary is deliberately small: it is exactly what the
multi-pathway classifiers and their routed losses need. Every operation
executed while a Tape is active records one node on that tape; the tape is
rebuilt on each forward pass and walked once, in reverse, by backward().
Without an active tape, operations evaluate to plain constants, which makes
inference cheap.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not line up for the requested operation."""


class ClassCountError(ValueError):
    """A classification operation was handed fewer than two classes."""


# Exact zeros in a log-softmax row only arise when every other class has
# underflowed; nudging them keeps outputs strictly negative so the weakness
# ratios downstream never divide by zero.
_NEG_FLOOR = -1e-300

_LOCAL = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_LOCAL, "tape", None)


@contextmanager
def record_kink_margins():
    """Collect each op's distance to its nearest gradient kink.

    Piecewise-smooth ops (relu gates, pooling ties, routed selections) append
    how far the forward pass ran from a switch point. Finite-difference
    checks are only meaningful when every margin exceeds the probe step.
    """
    prev = getattr(_LOCAL, "margins", None)
    sink: list[float] = []
    _LOCAL.margins = sink
    try:
        yield sink
    finally:
        _LOCAL.margins = prev


def note_kink_margin(value: float) -> None:
    sink = getattr(_LOCAL, "margins", None)
    if sink is not None:
        sink.append(float(value))


class Tensor:
    """A shaped block of float64 values, immutable by convention.

    ``grad_enabled`` marks trainable leaves. ``node_id``/``tape`` identify the
    node this tensor produced on the tape of its creating forward pass; both
    are rebound when the tensor is reused under a newer tape.
    """

    __slots__ = ("data", "grad_enabled", "grad", "node_id", "tape")

    def __init__(self, data, grad_enabled: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad_enabled = grad_enabled
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad_enabled={self.grad_enabled})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return _sum_all(self)

    def mean(self) -> "Tensor":
        return _mean_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Optional[Callable]):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tape:
    """One recorded forward pass.

    Nodes are appended in execution order, so every node's inputs precede it
    and a single reverse sweep implements the chain rule. Values an operation
    saves for its backward step live in the node's backward closure. A tape
    belongs to one thread; use it as a context manager around the forward
    pass it should record.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._leaf_tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def _enroll(self, t: Tensor) -> int:
        """Return t's node id on this tape, adding it as a leaf if new."""
        if t.tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        self._leaf_tensors[nid] = t
        t.tape = self
        t.node_id = nid
        return nid

    def _record(self, kind: str, input_ids: Sequence[int], backward: Callable) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(input_ids), backward))
        return nid

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Gradients of grad-enabled leaf tensors are additionally deposited on
        their ``.grad`` attribute (summed if already present).
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.backward is None:
                continue
            for in_id, gin in zip(node.inputs, node.backward(g)):
                if gin is None:
                    continue
                have = grads.get(in_id)
                if have is None:
                    # Copy: backward closures may hand back views or reuse
                    # one buffer for several inputs, and we accumulate below.
                    grads[in_id] = gin.copy()
                else:
                    have += gin
        self.gradients = grads
        for nid, t in self._leaf_tensors.items():
            if t.grad_enabled and nid in grads:
                t.grad = grads[nid].copy() if t.grad is None else t.grad + grads[nid]
        return grads


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; see Tape.backward."""
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise ValueError("loss was computed without an active tape")
    return tape.backward(loss)


def _op(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], make_backward) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if a tape is active.

    ``make_backward`` is called lazily (only when recording) and must return
    a function g -> per-input gradient tuple aligned with ``inputs``.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    ids = [tape._enroll(t) for t in inputs]
    out.node_id = tape._record(kind, ids, make_backward())
    out.tape = tape
    out.grad_enabled = any(t.grad_enabled for t in inputs)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = float(b)
        out = a.data + const
        return _op("add_const", out, [a], lambda: lambda g: (g,))
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    ash, bsh = a.data.shape, b.data.shape

    def mk():
        def bw(g):
            return _unbroadcast(g, ash), _unbroadcast(g, bsh)

        return bw

    return _op("add", out, [a, b], mk)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = float(b)
        out = a.data * const
        return _op("mul_const", out, [a], lambda: lambda g: (g * const,))
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def mk():
        def bw(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        return bw

    return _op("mul", out, [a, b], mk)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def mk():
        def bw(g):
            return g @ bd.T, ad.T @ g

        return bw

    return _op("matmul", out, [a, b], mk)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    gate = x.data > 0.0
    note_kink_margin(np.abs(x.data).min())
    return _op("relu", out, [x], lambda: lambda g: (g * gate,))


def log_softmax_rows(x: Tensor) -> Tensor:
    """Per-row log-softmax with max-subtraction; outputs strictly negative."""
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a 2-d tensor, got {x.shape}")
    if x.data.shape[1] < 2:
        raise ClassCountError(
            f"log-softmax over {x.data.shape[1]} class(es) is degenerate"
        )
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = np.minimum(out, _NEG_FLOOR)
    soft = np.exp(out)

    def mk():
        def bw(g):
            return (g - soft * g.sum(axis=1, keepdims=True),)

        return bw

    return _op("log_softmax_rows", out, [x], mk)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; spatial size preserved."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be [n,c,h,w], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d kernel must be [cout,cin,3,3], got {kernel.shape}")
    n, cin, h, w = x.data.shape
    cout = kernel.data.shape[0]
    if kernel.data.shape[1] != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {kernel.data.shape[1]}"
        )
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv2d bias must be [{cout}], got {bias.shape}")
    pad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    kd = kernel.data
    out = np.zeros((n, cout, h, w))
    for di in range(3):
        for dj in range(3):
            out += np.einsum(
                "ncij,oc->noij", pad[:, :, di : di + h, dj : dj + w], kd[:, :, di, dj]
            )
    out += bias.data[None, :, None, None]

    def mk():
        def bw(g):
            gk = np.zeros_like(kd)
            gpad = np.zeros_like(pad)
            for di in range(3):
                for dj in range(3):
                    win = pad[:, :, di : di + h, dj : dj + w]
                    gk[:, :, di, dj] = np.einsum("noij,ncij->oc", g, win)
                    gpad[:, :, di : di + h, dj : dj + w] += np.einsum(
                        "noij,oc->ncij", g, kd[:, :, di, dj]
                    )
            return gpad[:, :, 1 : 1 + h, 1 : 1 + w], gk, g.sum(axis=(0, 2, 3))

        return bw

    return _op("conv2d", out, [x, kernel, bias], mk)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution: a per-cell linear map over channels."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv1x1 input must be [n,c,h,w], got {x.shape}")
    n, cin, h, w = x.data.shape
    if weight.data.ndim != 2 or weight.data.shape[1] != cin:
        raise DimensionError(
            f"conv1x1 weight must be [cout,{cin}], got {weight.shape}"
        )
    cout = weight.data.shape[0]
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv1x1 bias must be [{cout}], got {bias.shape}")
    out = np.einsum("ncij,oc->noij", x.data, weight.data) + bias.data[None, :, None, None]
    xd, wd = x.data, weight.data

    def mk():
        def bw(g):
            return (
                np.einsum("noij,oc->ncij", g, wd),
                np.einsum("noij,ncij->oc", g, xd),
                g.sum(axis=(0, 2, 3)),
            )

        return bw

    return _op("conv1x1", out, [x, weight, bias], mk)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 input must be [n,c,h,w], got {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial size, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    ordered = np.sort(windows, axis=-1)
    top, runner_up = ordered[..., -1], ordered[..., -2]
    # Ties between exact zeros are relu-clamped: no gradient reaches them
    # whichever one wins, so they are not finite-difference hazards.
    gaps = (top - runner_up)[(top != 0.0) | (runner_up != 0.0)]
    if gaps.size:
        note_kink_margin(gaps.min())

    def mk():
        def bw(g):
            gw = np.zeros((n, c, h2, w2, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gx = (
                gw.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            return (gx,)

        return bw

    return _op("maxpool2", out, [x], mk)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Replicate each spatial cell factor x factor times."""
    if x.data.ndim != 4:
        raise DimensionError(f"nearest_upsample input must be [n,c,h,w], got {x.shape}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def mk():
        def bw(g):
            return (
                g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),
            )

        return bw

    return _op("nearest_upsample", out, [x], mk)


def nearest_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor spatial resize; backward scatters sums to sources."""
    if x.data.ndim != 4:
        raise DimensionError(f"nearest_resize input must be [n,c,h,w], got {x.shape}")
    n, c, h, w = x.data.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = x.data[:, :, rows][:, :, :, cols]

    def mk():
        def bw(g):
            gx = np.zeros((n, c, h, w))
            np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
            return (gx,)

        return bw

    return _op("nearest_resize", out, [x], mk)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"crop input must be [n,c,h,w], got {x.shape}")
    n, c, h, w = x.data.shape
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise DimensionError(
            f"crop window ({top},{left},{height},{width}) outside {h}x{w} input"
        )
    out = x.data[:, :, top : top + height, left : left + width].copy()

    def mk():
        def bw(g):
            gx = np.zeros((n, c, h, w))
            gx[:, :, top : top + height, left : left + width] = g
            return (gx,)

        return bw

    return _op("crop", out, [x], mk)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape).copy()
    orig = x.data.shape

    def mk():
        def bw(g):
            return (g.reshape(orig),)

        return bw

    return _op("reshape", out, [x], mk)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Pick one column per row: out[r] = x[r, indices[r]]."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise DimensionError(
            f"gather_rows expects [r,c] tensor and [r] indices, got {x.shape} and {idx.shape}"
        )
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]
    shape = x.data.shape

    def mk():
        def bw(g):
            gx = np.zeros(shape)
            gx[rows, idx] = g
            return (gx,)

        return bw

    return _op("gather_rows", out, [x], mk)


def select_elements(choices: Sequence[Tensor], indices) -> Tensor:
    """Elementwise selection among same-shaped tensors.

    out[pos] = choices[indices[pos]][pos]; the indices are constants, so
    gradient flows only into the selected entries of each choice.
    """
    if not choices:
        raise ValueError("select_elements needs at least one choice")
    shape = choices[0].data.shape
    for t in choices[1:]:
        if t.data.shape != shape:
            raise DimensionError(
                f"select_elements choices disagree: {shape} vs {t.data.shape}"
            )
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != shape:
        raise DimensionError(f"indices shape {idx.shape} must match choices {shape}")
    if idx.min() < 0 or idx.max() >= len(choices):
        raise ValueError("selection index out of range")
    stack = np.stack([t.data for t in choices])
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    masks = [idx == j for j in range(len(choices))]

    def mk():
        def bw(g):
            return tuple(g * m for m in masks)

        return bw

    return _op("select_elements", out, list(choices), mk)


def _sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()
    shape = x.data.shape

    def mk():
        def bw(g):
            return (np.full(shape, float(g)),)

        return bw

    return _op("sum", out, [x], mk)


def _mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()
    shape = x.data.shape

    def mk():
        def bw(g):
            return (np.full(shape, float(g) / n),)

        return bw

    return _op("mean", out, [x], mk)


@dataclass
class GradCheckReport:
    """Worst-coordinate comparison of analytic vs central-difference gradients."""

    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> GradCheckReport:
    """Check df/dx at every coordinate of x against central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    ``f`` must be a deterministic map from x to a scalar tensor.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    was_enabled, was_grad = x.grad_enabled, x.grad
    x.grad_enabled = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
    x.grad_enabled, x.grad = was_enabled, was_grad

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    worst = int(rel.argmax())
    return GradCheckReport(
        max_rel_error=float(rel[worst]),
        worst_index=worst,
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
    )
