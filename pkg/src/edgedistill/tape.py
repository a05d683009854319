"""Dense tensors with taped reverse-mode differentiation.

A :class:`Tape` records the forward operations of one network evaluation.
Leaves registered below the tape's freeze boundary never receive gradients,
and the backward sweep stops as soon as no trainable leaf lies further
upstream, so a frozen network prefix costs nothing at training time.

Only the operations the segmentation models need are provided: 2-D
convolution, ReLU, channel softmax, 2x upsampling (bilinear or nearest)
and channel concatenation.  Anything fancier is out of scope on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """The tape was used out of order (e.g. backward called twice)."""


class Tensor:
    """A node in the recorded computation: an ndarray plus graph wiring."""

    __slots__ = ("data", "tape", "requires_grad", "grad", "key", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray,
        tape: Optional["Tape"] = None,
        requires_grad: bool = False,
        key: Optional[str] = None,
    ):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.key = key
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None else g
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(dims={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of one forward pass.

    ``freeze_boundary`` is the index of the first trainable layer: leaves
    registered with a smaller layer index are frozen and get no gradient
    storage at all.
    """

    def __init__(self, freeze_boundary: int = 0):
        self.freeze_boundary = freeze_boundary
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._spent = False

    def leaf(self, data: np.ndarray, key: str, layer: int = 0) -> Tensor:
        t = Tensor(data, tape=self, requires_grad=layer >= self.freeze_boundary, key=key)
        self.leaves.append(t)
        return t

    def constant(self, data: np.ndarray) -> Tensor:
        return Tensor(data, tape=self, requires_grad=False)

    def record(
        self,
        out_data: np.ndarray,
        parents: Sequence[Tensor],
        backward: Callable[[np.ndarray], None],
    ) -> Tensor:
        """Append an op result to the tape; ``backward`` routes the output
        gradient to each parent's ``_accumulate``."""
        out = Tensor(out_data, tape=self, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        self.nodes.append(out)
        return out


def _tape_of(*tensors: Tensor) -> Tape:
    tapes = {id(t.tape) for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError("operands were recorded on different tapes")
    tape = next((t.tape for t in tensors if t.tape is not None), None)
    if tape is None:
        raise TapeError("operation requires at least one taped operand")
    return tape


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    return col, ho, wo


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    dcol = dcol.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcol[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW activations against OIKK kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, c, h, w = x.data.shape
    o, ci, kh, kw = kernel.data.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, got {c}")
    if bias.data.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.data.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")

    tape = _tape_of(x, kernel, bias)
    col, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    w2 = kernel.data.reshape(o, c * kh * kw)
    out = (w2 @ col).reshape(n, o, ho, wo) + bias.data.reshape(1, o, 1, 1)

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, o, ho * wo)
        if bias.requires_grad:
            bias._accumulate(gm.sum(axis=(0, 2)))
        if kernel.requires_grad:
            dw = np.einsum("nol,nkl->ok", gm, col).reshape(kernel.data.shape)
            kernel._accumulate(dw)
        if x.requires_grad:
            dcol = np.einsum("ok,nol->nkl", w2, gm)
            x._accumulate(_col2im(dcol, x.data.shape, kh, kw, stride, pad, ho, wo))

    return tape.record(out, (x, kernel, bias), backward)


def relu(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return tape.record(out, (x,), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("softmax_channels expects a rank-4 tensor")
    tape = _tape_of(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            x._accumulate(p * (g - dot))

    return tape.record(p, (x,), backward)


def _up1d_bilinear(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * a
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _down1d_bilinear(g: np.ndarray, axis: int) -> np.ndarray:
    # transpose of _up1d_bilinear, including the clamped borders
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * (ge + go)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double both spatial extents, bilinear (half-pixel centers) or nearest."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects a rank-4 tensor")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    tape = _tape_of(x)
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    else:
        out = _up1d_bilinear(_up1d_bilinear(x.data, 2), 3)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if mode == "nearest":
                n, c, h2, w2 = g.shape
                x._accumulate(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))
            else:
                x._accumulate(_down1d_bilinear(_down1d_bilinear(g, 3), 2))

    return tape.record(out, (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one operand")
    tape = _tape_of(*parts)
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum([p.data.shape[1] for p in parts])[:-1]

    def backward(g: np.ndarray) -> None:
        for part, gpart in zip(parts, np.split(g, splits, axis=1)):
            if part.requires_grad:
                part._accumulate(gpart)

    return tape.record(out, tuple(parts), backward)


def backward_partial(tape: Tape, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Run the reverse sweep and return gradients for trainable leaves only.

    The tape is single-shot: a second call without a fresh forward pass is an
    error, since saved activations belong to the already-consumed pass.
    """
    if tape._spent:
        raise TapeError("backward_partial called twice on the same tape")
    tape._spent = True
    if not tape.nodes:
        return {}
    loss = tape.nodes[-1]
    if loss.data.size != 1:
        raise TapeError("the last recorded value must be a scalar loss")
    if loss.requires_grad:
        loss.grad = np.full_like(loss.data, seed)
        for node in reversed(tape.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
    grads: dict[str, np.ndarray] = {}
    for leaf in tape.leaves:
        if leaf.requires_grad:
            grads[leaf.key] = (
                leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            )
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments for one named parameter set."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if set(params) != set(grads):
        raise KeyError(
            f"parameter/gradient key mismatch: {sorted(set(params) ^ set(grads))}"
        )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
