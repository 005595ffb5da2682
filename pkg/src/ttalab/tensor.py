"""Dense float32 tensors with reverse-mode autodiff, Adam, and the TNSR file format.

The op set is the minimum closure needed by the networks in this package:
conv2d (incl. stride-2 downsampling), 1x1 conv, nearest-neighbour upsample,
LeakyReLU / tanh / sigmoid, channel concat, broadcasted add/mul, L1 and MSE.
Everything is float32; any NaN/Inf produced by an op raises NumericError
instead of propagating.

Convolutions canonically take a single sample [C,H,W]; a leading batch axis
[B,C,H,W] is accepted everywhere and treated independently per sample.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    """A forward or backward pass produced NaN/Inf."""


class TapeError(RuntimeError):
    """backward() called on something that is not a taped scalar."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense N-D float32 array, optionally participating in the gradient tape.

    Leaves created with requires_grad=True accumulate d(loss)/d(leaf) into
    .grad across backward() calls until zero_grads() resets them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum-reduction trick: any NaN/Inf in the array makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by {op}")


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float32)
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _from_op(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.data.shape))

    return _from_op(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _from_op(data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * np.float32(s)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * np.float32(s))

    return _from_op(data, (a,), bwd, "scale")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    return _from_op(data, (a,), bwd, "reshape")


def tensor_sum(a: Tensor) -> Tensor:
    data = a.data.sum()

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, out.grad))

    return _from_op(data, (a,), bwd, "sum")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = np.float32(slope)
    data = np.maximum(a.data, a.data * s)  # slope < 1

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * np.where(a.data > 0, np.float32(1.0), s))

    return _from_op(data, (a,), bwd, "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - data * data))

    return _from_op(data, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * data * (1.0 - data))

    return _from_op(data, (a,), bwd, "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a occupies the leading block."""
    if a.data.ndim != b.data.ndim or a.data.shape[-2:] != b.data.shape[-2:]:
        raise ValueError(f"spatial mismatch in concat: {a.shape} vs {b.shape}")
    axis = a.data.ndim - 3
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]

    def bwd(out: Tensor) -> None:
        ga, gb = np.split(out.grad, [split], axis=axis)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _from_op(data, (a, b), bwd, "concat_channels")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    data = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad
            h, w = a.data.shape[-2], a.data.shape[-1]
            g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
            a._accumulate(g.sum(axis=(-3, -1)))

    return _from_op(data, (a,), bwd, "upsample_nearest")


# ---------------------------------------------------------------------------
# convolutions


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"conv input must be [C,H,W] or [B,C,H,W], got rank {x.ndim}")


def _im2col(x4: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    b, c, hp, wp = x4.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x4, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im_add(dcols: np.ndarray, b: int, c: int, hp: int, wp: int,
                kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # accumulate in [C,B,H,W] layout to keep the per-tap adds transpose-free
    dx = np.zeros((c, b, hp, wp), dtype=np.float32)
    d6 = dcols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += d6[:, i, j]
    return dx.transpose(1, 0, 2, 3)


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in,H,W] (or batched) input with [C_out,C_in,kH,kW] kernel."""
    x4, squeeze = _as_batched(input.data)
    if kernel.data.ndim != 4:
        raise ValueError(f"kernel must be [C_out,C_in,kH,kW], got rank {kernel.data.ndim}")
    cout, cin, kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    b, c, h, w = x4.shape
    if c != cin:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output size {ho}x{wo}")

    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float32)
        xp[:, :, padding:padding + h, padding:padding + w] = x4
    else:
        xp = x4
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray((kmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(outT: Tensor) -> None:
        g = outT.grad
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
        if kernel.requires_grad:
            kernel._accumulate((gmat @ cols.T).reshape(cout, cin, kh, kw))
        if input.requires_grad:
            dcols = kmat.T @ gmat
            dxp = _col2im_add(dcols, b, cin, hp, wp, kh, kw, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            input._accumulate(dxp[0] if squeeze else dxp)

    return _from_op(out, (input, kernel), bwd, "conv2d")


def conv2d_1x1(input: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map over channels: kernel [C_out,C,1,1], bias [C_out]."""
    x4, squeeze = _as_batched(input.data)
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (1, 1):
        raise ValueError(f"kernel must be [C_out,C,1,1], got {kernel.data.shape}")
    cout, cin = kernel.data.shape[:2]
    if x4.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x4.shape[1]}, kernel expects {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"bias must be [{cout}], got {bias.data.shape}")
    w2 = kernel.data.reshape(cout, cin)
    out = np.einsum("oc,bchw->bohw", w2, x4, optimize=True) + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bwd(outT: Tensor) -> None:
        g = outT.grad
        g4 = g[None] if squeeze else g
        if kernel.requires_grad:
            dw = np.einsum("bohw,bchw->oc", g4, x4, optimize=True)
            kernel._accumulate(dw.reshape(cout, cin, 1, 1))
        if bias.requires_grad:
            bias._accumulate(g4.sum(axis=(0, 2, 3)))
        if input.requires_grad:
            dx = np.einsum("oc,bohw->bchw", w2, g4, optimize=True)
            input._accumulate(dx[0] if squeeze else dx)

    return _from_op(out, (input, kernel, bias), bwd, "conv2d_1x1")


# ---------------------------------------------------------------------------
# losses


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar Tensor)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.abs(diff).mean()

    def bwd(out: Tensor) -> None:
        g = out.grad * np.sign(diff, dtype=np.float32) / np.float32(n)
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _from_op(data, (a, b), bwd, "l1_distance")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements (scalar Tensor)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.square(diff, dtype=np.float32).mean()

    def bwd(out: Tensor) -> None:
        g = out.grad * diff * np.float32(2.0 / n)
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _from_op(data, (a, b), bwd, "mse_loss")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from the scalar loss.

    Repeated calls without zero_grads() accumulate.
    """
    if loss.data.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not on the gradient tape")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones((), dtype=np.float32))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
            _check_finite(node.grad, "backward")
            if node._parents:
                # interior node: free its grad buffer once consumed
                node.grad = None


def zero_grads(params) -> None:
    """Reset gradient buffers of the given tensors to zero."""
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """Adam moment buffers for a fixed ordered parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def bind(self, params: list[Tensor]) -> "AdamState":
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        return self


def make_adam(params: list[Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps).bind(params)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One Adam update with bias correction; reads each param's .grad."""
    if len(state.m) != len(params):
        raise ValueError("AdamState not bound to this parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError("missing grad for parameter in adam_step")
        if p.grad.shape != p.data.shape:
            raise ValueError("grad/param shape mismatch in adam_step")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * p.grad
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * np.square(p.grad)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)
        _check_finite(p.data, "adam_step")


@dataclass(frozen=True)
class LrSchedule:
    """Hold at base_lr, then decay linearly to zero over decay_epochs."""

    base_lr: float
    hold_epochs: int
    decay_epochs: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.hold_epochs < 0 or self.decay_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def total_epochs(self) -> int:
        return self.hold_epochs + self.decay_epochs

    def lr(self, epoch: int) -> float:
        if epoch < self.hold_epochs:
            return self.base_lr
        if self.decay_epochs == 0:
            return 0.0
        remaining = self.hold_epochs + self.decay_epochs - epoch
        return self.base_lr * max(0, remaining) / self.decay_epochs


# ---------------------------------------------------------------------------
# TNSR binary format: magic "TNSR", u8 version=1, u8 rank, rank x u32 LE dims,
# then f32 LE data row-major.

_TNSR_MAGIC = b"TNSR"
_TNSR_VERSION = 1


def write_tnsr(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")  # tobytes() serialises row-major regardless
    if arr.ndim > 255:
        raise ValueError("rank too large for TNSR")
    with open(path, "wb") as f:
        f.write(_TNSR_MAGIC)
        f.write(struct.pack("<BB", _TNSR_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _TNSR_MAGIC:
        raise ValueError(f"{path}: bad magic, not a TNSR file")
    if len(blob) < 6:
        raise ValueError(f"{path}: truncated TNSR header")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != _TNSR_VERSION:
        raise ValueError(f"{path}: unsupported TNSR version {version}")
    head = 6 + 4 * rank
    if len(blob) < head:
        raise ValueError(f"{path}: truncated TNSR dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = int(np.prod(dims)) if rank else 1
    expected = head + 4 * count
    if len(blob) != expected:
        raise ValueError(f"{path}: corrupt TNSR payload "
                         f"(expected {expected} bytes, got {len(blob)})")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=head)
    return data.reshape(dims).astype(np.float32, copy=True)
