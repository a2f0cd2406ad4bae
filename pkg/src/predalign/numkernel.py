"""Minimal reverse-mode autodiff over numpy arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the output carries a :class:`Node` describing how to push the
upstream gradient back into the inputs. :func:`backward` topologically sorts
those nodes into a :class:`Tape` and replays it in reverse.

Only the operations needed by a small single-shot detector, two domain
discriminators and their losses are provided.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "consumed")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Shaped real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, inputs: tuple, kind: str, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(ad * bd, (a, b), "mul", bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor, eps: float = PROB_EPS) -> Tensor:
    """Natural log of ``a`` clamped to ``[eps, inf)``; no gradient below the clamp."""
    x = a.data
    inside = x >= eps
    out = np.log(np.maximum(x, eps))
    return _result(out, (a,), "log", lambda g: (np.where(inside, g / np.maximum(x, eps), 0.0),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), "sum", bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of the rows of ``x``: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result(xd @ wd + bias.data, (x, weight, bias), "dense", bw)


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an ``[N, C, H, W]`` batch with zero padding."""
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if bias.shape != (k,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {k} output channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # windows: [N, C, Ho, Wo, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, K]
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    kd = kernel.data

    def bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [K, C, kh, kw]
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))  # [N, Ho, Wo, C]
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    return _result(np.ascontiguousarray(out), (x, kernel, bias), "conv2d", bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


class NonFiniteError(ValueError):
    pass


def _check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{what}: non-finite input")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x, "sigmoid")
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    _check_finite(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), "softmax", bw)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("softmax", "softmax_over_last_axis"):
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# loss primitives
# ---------------------------------------------------------------------------


def smooth_l1(x: Tensor, weights=None) -> Tensor:
    """Sum over components of 0.5 x^2 (|x| < 1) or |x| - 0.5, optionally weighted."""
    d = x.data
    small = np.abs(d) < 1.0
    val = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    dval = np.where(small, d, np.sign(d))
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=d.dtype), d.shape)
        val, dval = val * weights, dval * weights
    return _result(np.asarray(val.sum()), (x,), "smooth_l1", lambda g: (g * dval,))


def bce(p: Tensor, target, weights=None, reduction: str = "mean", eps: float = PROB_EPS) -> Tensor:
    """Binary log-loss ``-t log p - (1 - t) log(1 - p)`` with p clamped to [eps, 1 - eps].

    ``weights`` multiplies each term before the reduction; ``"mean"`` divides by
    the number of terms, not by the weight total.
    """
    pd = p.data
    t = np.broadcast_to(np.asarray(target, dtype=pd.dtype), pd.shape)
    pc = np.clip(pd, eps, 1.0 - eps)
    inside = (pd >= eps) & (pd <= 1.0 - eps)
    terms = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    dterms = np.where(inside, -t / pc + (1.0 - t) / (1.0 - pc), 0.0)
    if weights is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=pd.dtype), pd.shape)
        terms, dterms = terms * w, dterms * w
    scale = 1.0 / pd.size if reduction == "mean" else 1.0
    return _result(np.asarray(terms.sum() * scale), (p,), "bce", lambda g: (g * dterms * scale,))


def cross_entropy(probs: Tensor, labels, weights=None, eps: float = PROB_EPS) -> Tensor:
    """Summed ``-log probs[i, label_i]`` over rows, probabilities clamped below at eps."""
    pd = probs.data
    flat = pd.reshape(-1, pd.shape[-1])
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != flat.shape[0]:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {flat.shape[0]} rows")
    n_cls = flat.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"cross_entropy: label outside [0, {n_cls})")
    rows = np.arange(flat.shape[0])
    picked = flat[rows, labels]
    w = np.ones_like(picked) if weights is None else np.asarray(weights, dtype=pd.dtype).reshape(-1)
    val = -(w * np.log(np.maximum(picked, eps))).sum()

    def bw(g):
        gflat = np.zeros_like(flat)
        gflat[rows, labels] = np.where(picked >= eps, -w / np.maximum(picked, eps), 0.0) * g
        return (gflat.reshape(pd.shape),)

    return _result(np.asarray(val), (probs,), "cross_entropy", bw)


def loss_primitive(kind: str, *args, **kwargs) -> Tensor:
    if kind == "bce":
        return bce(*args, **kwargs)
    if kind == "cross_entropy":
        return cross_entropy(*args, **kwargs)
    if kind == "smooth_l1":
        return smooth_l1(*args, **kwargs)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Executed operations reachable from a loss, consumers before producers."""

    nodes: list[tuple[Tensor, Node]] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        order.reverse()
        return cls([(t, t.node) for t in order])


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Leaves listed in ``inputs`` that are not reachable from the loss receive a
    zero gradient. Each recorded graph can be replayed only once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise ValueError("loss is not on the tape (nothing requires grad)")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    tape = Tape.from_loss(loss)
    for _, node in tape.nodes:
        if node.consumed:
            raise RuntimeError("backward already ran through this graph; run a new forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t, node in tape.nodes:
        g = grads.pop(id(t), None)
        node.consumed = True
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp.node is None:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        node.inputs = ()
        node.backward_fn = _spent
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _spent(g):
    raise RuntimeError("backward already ran through this graph")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """In-place ``v <- mu v + g; p <- p - lr v``. Missing grads count as zero."""
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        if g is None:
            g = 0.0
        v *= state.momentum
        v += g
        p.data -= state.lr * v


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# init and checking
# ---------------------------------------------------------------------------


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def grad_check(fn: Callable, point, eps: float = 1e-4, *, max_coords: int | None = None,
               seed: int = 0, floor: float = 1e-5) -> float:
    """Largest coordinate-wise relative error between backward and central differences.

    ``point`` is either an array, in which case ``fn`` receives a Tensor built
    from it, or a sequence of parameter Tensors that ``fn()`` closes over.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` samples that many coordinates per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(point, (Tensor, np.ndarray, float, int, list)) and not _is_param_list(point):
        raw = point.data if isinstance(point, Tensor) else point
        x = Tensor(np.array(raw, dtype=np.float64), requires_grad=True)
        params, f = [x], (lambda: fn(x))
    else:
        params, f = list(point), fn
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f().item()
            flat[i] = orig - eps
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def _is_param_list(point) -> bool:
    return isinstance(point, (list, tuple)) and len(point) > 0 and all(isinstance(p, Tensor) for p in point)


class Module:
    """Named parameter container shared by the detector and discriminators."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.named_parameters():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def _param(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        return tensor

    def _p(self, name: str, frozen: bool) -> Tensor:
        p = self.params[name]
        return p.detach() if frozen else p
