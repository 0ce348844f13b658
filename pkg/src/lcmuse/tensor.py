"""Dense tensors with a reverse-mode automatic differentiation engine.

The engine records a DAG of operations; every backward rule is itself written
in terms of recorded operations, so gradients produced with
``grad(..., create_graph=True)`` can be differentiated again.  That
gradient-of-gradient capability is what the score-matching losses and the
Hessian-vector products elsewhere in the package rely on.

Complex images are stored as real tensors with a leading channel axis of size
2 (``[real, imag]``); :func:`dot_re` then computes the real part of the
complex inner product, and :func:`fft2`/:func:`ifft2` implement the unitary
2-D DFT on that encoding.
"""

from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GradientWarning, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "zeros_like",
    "ones_like",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "relu",
    "conv2d",
    "kernel_transpose",
    "fft2",
    "ifft2",
    "cmul",
    "cconj",
    "dot_re",
    "norm2",
    "from_complex",
    "to_complex",
]

DEFAULT_DTYPE = np.float64

# Grad mode is per-thread so simultaneous solves on a thread pool cannot
# switch recording off under each other's forward passes.
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (current thread)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


# A parent entry is (input tensor, vjp); the vjp maps the upstream gradient
# to this input's gradient and must be written with recorded ops so that a
# second backward pass through it is valid.
_Parents = tuple[tuple["Tensor", Callable[["Tensor"], "Tensor"]], ...]


class Tensor:
    """Immutable dense array, optionally a node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: _Parents = ()

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: _Parents = ()) -> "Tensor":
        # Internal: trusts `arr` to be freshly allocated.
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = bool(parents)
        t._parents = parents
        return t

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        grad_tag = ", graph" if self._parents else (", leaf" if self.requires_grad else "")
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_tag})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return _add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return _add(self, _neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return _add(_coerce(other, self.dtype), _neg(self))

    def __mul__(self, other):
        return _mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return _mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _pow(other, -1.0))
        return _mul(self, _coerce(1.0 / float(other), self.dtype))

    def __rtruediv__(self, other):
        return _mul(_coerce(other, self.dtype), _pow(self, -1.0))

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, float(p))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in _norm_axes(axis, self.ndim)]))
        return _sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))

    def broadcast_to(self, shape) -> "Tensor":
        return _broadcast_to(self, tuple(shape))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.ones_like(t.data))


# -- graph construction helpers ----------------------------------------------


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _track(data: np.ndarray, parents: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    if is_grad_enabled():
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        if live:
            return Tensor._wrap(data, live)
    return Tensor._wrap(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch, {a.shape} vs {b.shape}")
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if da != db:
            raise ShapeError(
                f"{op}: shape mismatch at axis {ax}: {da} vs {db} (shapes {a.shape} vs {b.shape})"
            )


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# -- elementwise and reduction primitives ------------------------------------


def _binary_shapes_ok(a: Tensor, b: Tensor, op: str) -> None:
    # Only exact-shape or scalar (0-d) operands; no general broadcasting.
    if a.ndim == 0 or b.ndim == 0:
        return
    _check_same_shape(a, b, op)


def _add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "add")
    out = a.data + b.data

    def vjp_side(x: Tensor):
        def vjp(g: Tensor) -> Tensor:
            if x.ndim == 0 and g.ndim != 0:
                return g.sum()
            return g
        return vjp

    return _track(out, [(a, vjp_side(a)), (b, vjp_side(b))])


def _neg(a: Tensor) -> Tensor:
    return _track(-a.data, [(a, lambda g: _neg(g))])


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "mul")
    out = a.data * b.data

    def vjp_side(x: Tensor, other: Tensor):
        def vjp(g: Tensor) -> Tensor:
            gx = _mul(g, other)
            if x.ndim == 0 and gx.ndim != 0:
                return gx.sum()
            return gx
        return vjp

    return _track(out, [(a, vjp_side(a, b)), (b, vjp_side(b, a))])


def _pow(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def vjp(g: Tensor) -> Tensor:
        return _mul(g, _mul(_coerce(p, a.dtype), _pow(a, p - 1.0)))

    return _track(out, [(a, vjp)])


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.add.reduce(a.data, axis=axes, keepdims=keepdims) if a.ndim else a.data.copy()
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g: Tensor) -> Tensor:
        gk = g if keepdims or g.shape == kept_shape else _reshape(g, kept_shape)
        return _broadcast_to(gk, a.shape)

    return _track(np.asarray(out), [(a, vjp)])


def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape).copy()

    def vjp(g: Tensor) -> Tensor:
        return _reshape(g, a.shape)

    return _track(out, [(a, vjp)])


def _broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    padded = (1,) * lead + a.shape
    axes = tuple(i for i, (ds, dt) in enumerate(zip(padded, shape)) if ds == 1 and dt != 1)

    def vjp(g: Tensor) -> Tensor:
        gs = _sum(g, axis=axes, keepdims=True) if axes else g
        return _reshape(gs, a.shape)

    return _track(out, [(a, vjp)])


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    mask = (a.data > 0).astype(a.data.dtype)
    out = a.data * mask
    mask_t = Tensor._wrap(mask)

    def vjp(g: Tensor) -> Tensor:
        return _mul(g, mask_t)

    return _track(out, [(a, vjp)])


# -- convolution --------------------------------------------------------------


def _conv_windows(x4: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,H,W,kh,kw]


def _conv_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    squeeze = x.ndim == 3
    x4 = x[None] if squeeze else x
    w = _conv_windows(x4, k.shape[2], k.shape[3])
    y = np.tensordot(w, k, axes=([1, 4, 5], [1, 2, 3]))  # [B,H,W,O]
    y = np.ascontiguousarray(np.moveaxis(y, 3, 1))
    return y[0] if squeeze else y


def _kernel_grad_raw(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    squeeze = x.ndim == 3
    x4 = x[None] if squeeze else x
    g4 = g[None] if squeeze else g
    w = _conv_windows(x4, kh, kw)
    # D[o,c,u,v] = sum_{b,h,w} g[b,o,h,w] * xpad[b,c,h+u,w+v]
    return np.tensordot(g4, w, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv_args(x: Tensor, kernels: Tensor, bias) -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [B,C,H,W], got rank {x.ndim}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be [C_out,C_in,k,k], got rank {kernels.ndim}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel spatial axes must match, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}")
    if x.shape[-3] != c_in:
        raise ShapeError(
            f"conv2d: input channel axis has {x.shape[-3]} channels, kernels expect {c_in}"
        )
    if bias is not None:
        if bias.ndim != 1 or bias.shape[0] != c_out:
            raise ShapeError(
                f"conv2d: bias axis 0 must have {c_out} entries, got shape {bias.shape}"
            )


def _conv2d_core(x: Tensor, kernels: Tensor) -> Tensor:
    out = _conv_raw(x.data, kernels.data)
    kh = kernels.shape[2]

    def vjp_x(g: Tensor) -> Tensor:
        return _conv2d_core(g, kernel_transpose(kernels))

    def vjp_k(g: Tensor) -> Tensor:
        return _kernel_grad(x, g, kh)

    return _track(out, [(x, vjp_x), (kernels, vjp_k)])


def _kernel_grad(x: Tensor, g: Tensor, k: int) -> Tensor:
    out = _kernel_grad_raw(x.data, g.data, k, k)

    def vjp_x(G: Tensor) -> Tensor:
        return _conv2d_core(g, kernel_transpose(G))

    def vjp_g(G: Tensor) -> Tensor:
        return _conv2d_core(x, G)

    return _track(out, [(x, vjp_x), (g, vjp_g)])


def kernel_transpose(k: Tensor) -> Tensor:
    """Swap in/out channel axes and flip both spatial axes.

    This is the kernel of the adjoint convolution; the transform is an
    involution and self-adjoint, so its backward rule is itself.
    """
    if k.ndim != 4:
        raise ShapeError(f"kernel_transpose: expected rank-4 kernels, got rank {k.ndim}")
    out = np.ascontiguousarray(k.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])

    def vjp(g: Tensor) -> Tensor:
        return kernel_transpose(g)

    return _track(out, [(k, vjp)])


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero 'same' padding and per-channel bias.

    ``x`` is ``[C_in,H,W]`` or ``[B,C_in,H,W]``; ``kernels`` is
    ``[C_out,C_in,k,k]`` with odd ``k``; output spatial size equals input.
    """
    _check_conv_args(x, kernels, bias)
    y = _conv2d_core(x, kernels)
    if bias is not None:
        bshape = (bias.shape[0], 1, 1) if x.ndim == 3 else (1, bias.shape[0], 1, 1)
        y = y + _broadcast_to(_reshape(bias, bshape), y.shape)
    return y


# -- complex-as-2-channel helpers ---------------------------------------------


def _check_c2(t: Tensor, op: str) -> None:
    if t.ndim < 3 or t.shape[-3] != 2:
        raise ShapeError(f"{op}: expected [...,2,H,W] complex encoding, got shape {t.shape}")


def to_complex(t: Tensor | np.ndarray) -> np.ndarray:
    """Decode ``[...,2,H,W]`` into a complex ndarray ``[...,H,W]``."""
    d = t.data if isinstance(t, Tensor) else np.asarray(t)
    if d.ndim < 3 or d.shape[-3] != 2:
        raise ShapeError(f"to_complex: expected [...,2,H,W], got shape {d.shape}")
    re = np.take(d, 0, axis=-3)
    im = np.take(d, 1, axis=-3)
    return re + 1j * im


def from_complex(arr: np.ndarray, dtype=DEFAULT_DTYPE) -> Tensor:
    """Encode a complex ndarray ``[...,H,W]`` as a ``[...,2,H,W]`` tensor."""
    arr = np.asarray(arr)
    out = np.stack([arr.real, arr.imag], axis=-3).astype(dtype)
    return Tensor._wrap(out)


def fft2(t: Tensor) -> Tensor:
    """Unitary 2-D DFT of the complex image encoded on the size-2 axis.

    As a real-linear map on the 2-channel encoding this is orthogonal, so its
    backward rule is :func:`ifft2` (and vice versa).
    """
    _check_c2(t, "fft2")
    yc = np.fft.fft2(to_complex(t), norm="ortho")
    out = np.stack([yc.real, yc.imag], axis=-3).astype(t.dtype)
    return _track(out, [(t, lambda g: ifft2(g))])


def ifft2(t: Tensor) -> Tensor:
    """Inverse of :func:`fft2`."""
    _check_c2(t, "ifft2")
    yc = np.fft.ifft2(to_complex(t), norm="ortho")
    out = np.stack([yc.real, yc.imag], axis=-3).astype(t.dtype)
    return _track(out, [(t, lambda g: fft2(g))])


def cconj(t: Tensor) -> Tensor:
    """Complex conjugate on the 2-channel encoding (negate the imag channel)."""
    _check_c2(t, "cconj")
    sign = np.ones_like(t.data)
    im = [slice(None)] * t.ndim
    im[-3] = slice(1, 2)
    sign[tuple(im)] = -1.0
    out = t.data * sign

    def vjp(g: Tensor) -> Tensor:
        return cconj(g)

    return _track(out, [(t, vjp)])


def cmul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise complex multiply of two ``[...,2,H,W]`` tensors."""
    _check_c2(a, "cmul")
    _check_c2(b, "cmul")
    _check_same_shape(a, b, "cmul")
    ac, bc = to_complex(a), to_complex(b)
    out = np.stack([(ac * bc).real, (ac * bc).imag], axis=-3).astype(a.dtype)

    def vjp_side(other: Tensor):
        def vjp(g: Tensor) -> Tensor:
            return cmul(cconj(other), g)
        return vjp

    return _track(out, [(a, vjp_side(b)), (b, vjp_side(a))])


def dot_re(a: Tensor, b: Tensor) -> Tensor:
    """Real Euclidean dot product of the encodings; equals Re(a^H b)."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    _check_same_shape(a, b, "dot_re")
    return _mul(a, b).sum()


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor."""
    return _pow(_mul(a, a).sum(), 0.5)


# -- reverse-mode differentiation ---------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(
    root: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``root`` with respect to ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients support another :func:`grad` call (second-order
    derivatives).  Nodes not reachable from ``root`` get a zero gradient and a
    :class:`GradientWarning`.
    """
    if not isinstance(root, Tensor):
        raise TypeError("grad: root must be a Tensor")
    if root.data.size != 1:
        raise ShapeError(f"grad: root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    order = _toposort(root)
    grads: dict[int, Tensor] = {id(root): Tensor._wrap(np.ones_like(root.data))}

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"internal: vjp produced shape {pg.shape} for parent {parent.shape}"
                    )
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    out: list[Tensor] = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            warnings.warn(
                "grad: a requested tensor is not reachable from the root; returning zeros",
                GradientWarning,
                stacklevel=2,
            )
            g = zeros_like(w)
        out.append(g)
    return out
