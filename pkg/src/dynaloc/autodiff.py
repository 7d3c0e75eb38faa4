"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (if any input needs
a gradient).  ``tape.backward(loss)`` walks the records in reverse order once
and accumulates ``.grad`` on leaf tensors.

    with Tape() as tape:
        y = relu(x @ w + b)
        loss = mean(y)
    tape.backward(loss)
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
BCE_EPS = 1e-7

_node_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """A dense float64 array with an optional gradient."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, which is a topological order of
    the graph, so a single reverse sweep computes all gradients.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._used = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.records.append(Record(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if self._used:
            raise RuntimeError("tape has already been used for a backward pass")
        self._used = True
        if grad is None:
            if loss.values.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit gradient")
            grad = np.ones_like(loss.values)
        grads: dict[int, np.ndarray] = {loss.node_id: np.asarray(grad, dtype=DTYPE)}
        produced = {rec.output.node_id for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output.node_id, None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + g
                else:
                    grads[t.node_id] = g
                if t.node_id not in produced:
                    leaves[t.node_id] = t
        for nid, t in leaves.items():
            g = grads[nid]
            t.grad = g.copy() if t.grad is None else t.grad + g
        if loss.node_id not in produced and loss.requires_grad:
            loss.grad = np.asarray(grad, dtype=DTYPE).copy()


def _make(op: str, values: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = np.asarray(values, dtype=DTYPE)
    out.requires_grad, out.grad, out.name, out.node_id = needs, None, None, next(_node_ids)
    if needs and _tape_stack:
        _tape_stack[-1].record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # batched inputs against a shared weight: one GEMM instead of a per-item product and a sum
            gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make("matmul", a.values @ b.values, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def _last_max(v: np.ndarray) -> np.ndarray:
    # numpy reduces a short trailing axis one row at a time; a loop over it is much faster
    if v.shape[-1] > 32:
        return v.max(axis=-1, keepdims=True)
    m = v[..., 0].copy()
    for k in range(1, v.shape[-1]):
        np.maximum(m, v[..., k], out=m)
    return m[..., None]


def _last_sum(v: np.ndarray) -> np.ndarray:
    return (v @ np.ones(v.shape[-1], dtype=DTYPE))[..., None]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default)."""
    last = axis in (-1, x.ndim - 1)
    if last:
        e = np.exp(x.values - _last_max(x.values))
        s = e / _last_sum(e)
    else:
        e = np.exp(x.values - x.values.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = g * s
        return (gs - s * (_last_sum(gs) if last else gs.sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.values.transpose(axes), (x,),
                 lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros_like(x.values)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", x.values[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.values for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", x.values.sum(axis=axis), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    n = x.values.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", x.values.mean(axis=axis), (x,), backward)


def l2_norm(x: Tensor) -> Tensor:
    """Unsquared Euclidean norm of each row of a 2-d tensor.

    The subgradient at an exactly-zero row is taken as zero.
    """
    if x.ndim != 2:
        raise ValueError(f"l2_norm expects a 2-d tensor, got shape {x.shape}")
    norms = np.sqrt((x.values ** 2).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        return (x.values * scale[:, None],)

    return _make("l2_norm", norms, (x,), backward)


def bce(prob: Tensor, label) -> Tensor:
    """Per-sample binary cross entropy -(d log p + (1 - d) log(1 - p)).

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; the gradient is zero
    where the clamp is active.
    """
    d = np.asarray(label.values if isinstance(label, Tensor) else label, dtype=DTYPE)
    if d.shape != prob.shape:
        raise ValueError(f"bce label shape {d.shape} != prob shape {prob.shape}")
    p = np.clip(prob.values, BCE_EPS, 1.0 - BCE_EPS)
    active = (prob.values > BCE_EPS) & (prob.values < 1.0 - BCE_EPS)
    out = -(d * np.log(p) + (1.0 - d) * np.log(1.0 - p))

    def backward(g):
        return (g * (-(d / p) + (1.0 - d) / (1.0 - p)) * active,)

    return _make("bce", out, (prob,), backward)


# ---------------------------------------------------------------------------
# convolutions (NCHW, weights OIHW for conv2d and IOHW for the transpose)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(N, C, H, W) -> columns (kh*kw*C, ho*wo*N), ordered (i, j, c) x (y, x, n).

    Batch is the innermost axis so every slice copy moves long contiguous runs.
    """
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"convolution output would be empty for input {x.shape}")
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding, n), dtype=DTYPE)
    xp[:, padding : padding + h, padding : padding + w] = x.transpose(1, 2, 3, 0)
    cols = np.empty((kh, kw, c, ho, wo, n), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(kh * kw * c, ho * wo * n), ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns an (N, C, H, W) view."""
    n, c, h, w = shape
    blocks = cols.reshape(kh, kw, c, ho, wo, n)
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding, n), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[i, j]
    return xp[:, padding : padding + h, padding : padding + w].transpose(3, 0, 1, 2)


def _channel_major(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, H*W*N); free when x is a transposed CHWN view."""
    n, c, h, w = x.shape
    return x.transpose(1, 2, 3, 0).reshape(c, h * w * n)


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x`` is (C, H, W) or (N, C, H, W); ``weight`` is (F, C, kh, kw)."""
    x, squeeze = _batched(x)
    f, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    n = x.shape[0]
    cols, ho, wo = _im2col(x.values, kh, kw, stride, padding)
    wmat = weight.values.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    out = wmat @ cols
    if bias is not None:
        out += bias.values[:, None]
    out = out.reshape(f, ho, wo, n).transpose(3, 0, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    xshape = x.shape

    def backward(g):
        gmat = _channel_major(g)
        gw = (gmat @ cols.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ gmat, xshape, kh, kw, stride, padding, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    out_t = _make("conv2d", out, inputs, backward)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``weight`` is (C_in, C_out, kh, kw); output spatial size is
    ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, squeeze = _batched(x)
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ValueError(f"transposed_conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed_conv2d output would be empty for input {x.shape}")
    oshape = (n, cout, ho, wo)
    xmat = _channel_major(x.values)
    wmat = weight.values.transpose(0, 2, 3, 1).reshape(cin, kh * kw * cout)
    out = _col2im(wmat.T @ xmat, oshape, kh, kw, stride, padding, h, w)
    if bias is not None:
        out = out + bias.values[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        cols, _, _ = _im2col(g, kh, kw, stride, padding)
        gw = (xmat @ cols.T).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gx = (wmat @ cols).reshape(cin, h, w, n).transpose(3, 0, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out_t = _make("transposed_conv2d", out, inputs, backward)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# ---------------------------------------------------------------------------
# gradient reversal


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"GRL lambda must be finite and >= 0, got {self.lam}")


def grl_backward(upstream_grad, cfg: GrlConfig):
    """Gradient of the reversal layer: ``-lambda * upstream``."""
    if isinstance(upstream_grad, Tensor):
        return Tensor(-cfg.lam * upstream_grad.values)
    return -cfg.lam * np.asarray(upstream_grad, dtype=DTYPE)


def grl_forward(x: Tensor, cfg: GrlConfig) -> Tensor:
    """Identity on the forward pass; flips and scales gradients by ``-lambda``."""
    return _make("grl", x.values.copy(), (x,), lambda g: (grl_backward(g, cfg),))


# ---------------------------------------------------------------------------
# optimisation and checking


def sgd_step(params: Iterable[Tensor], lr: float):
    """Plain SGD: ``p <- p - lr * grad``, then clear the gradients."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"parameters without gradient: {', '.join(missing)}")
    for p in params:
        p.values -= lr * p.grad
        p.grad = None


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Sequence[int] | None = None, kink_tol: float = 1e-2) -> float:
    """Compare the tape gradient of scalar ``fn`` at ``point`` with central differences.

    Returns max |analytic - numeric| / max(1, |analytic|) over the checked
    coordinates.  A coordinate whose one-sided differences disagree by more
    than ``kink_tol`` (relative) sits at a non-differentiable point and is
    skipped.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(point.values if isinstance(point, Tensor) else point, dtype=DTYPE),
               requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if y.values.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(y.values)):
        raise ValueError("function value is not finite")
    tape.backward(y)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad
    flat = x.values.reshape(-1)
    f0 = y.values.item()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0

    def f_at(v):
        return fn(Tensor(v.reshape(x.shape))).values.item()

    for i in idx:
        orig = flat[i]
        probe = flat.copy()
        probe[i] = orig + step
        fp = f_at(probe)
        probe[i] = orig - step
        fm = f_at(probe)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        central = (fp - fm) / (2 * step)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
            continue
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - central) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: "ADDL" | u32 version | u32 count |
#   per tensor: u32 name_len | name utf-8 | u32 rank | u64 dims[rank] | f64 values (LE)

CHECKPOINT_MAGIC = b"ADDL"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict[str, Tensor | np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(dump_tensors(named))


def dump_tensors(named: dict[str, Tensor | np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, t in named.items():
        arr = np.asarray(t.values if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_tensors(fh.read())


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an ADDL checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(DTYPE)
        off += 8 * size
    if off != len(buf):
        raise ValueError(f"trailing bytes in checkpoint ({len(buf) - off})")
    return out
