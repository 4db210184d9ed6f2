"""Dense float64 tensors with reverse-mode differentiation.

Operations executed inside a :func:`record` block append one node to the
active :class:`Graph` whenever any input requires a gradient.  Outside a
recording block nothing is tracked, which is how frozen models (the teacher)
are run.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with record():
    ...     loss = tsum(mul(w, w))
    >>> grads = backward(loss)
    >>> grads[w]
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "Graph",
    "GradientMap",
    "GradCheckResult",
    "record",
    "active_graph",
    "backward",
    "grad_check",
    "matmul",
    "conv2d",
    "batchnorm2d",
    "relu",
    "clamp_min_per_channel",
    "softmax_cross_entropy",
    "kl_divergence_softened",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "mean",
    "pool2d",
    "linear",
    "reshape",
    "pad2d",
    "log_softmax",
    "softmax",
]

TRAINING = "training"
EVALUATION = "evaluation"


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """An n-dimensional float64 buffer, optionally part of a gradient graph.

    ``node`` is the index of the graph node that produced this tensor, or
    ``None`` for leaves and untracked values.
    """

    __slots__ = ("data", "requires_grad", "node", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.graph: Graph | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted internal constructor: no copy
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node = None
        t.graph = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{tag})"

    # operator sugar for tests and interactive use
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    # per input: upstream node index, leaf tensor, or None for constants.  Holding
    # indices rather than intermediate tensors keeps the graph free of reference
    # cycles, so activations are released as soon as the graph is dropped.
    inputs: tuple[int | Tensor | None, ...]
    output_shape: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # distance of the forward point to the nearest non-differentiable point
    kink: float = np.inf


@dataclass
class Graph:
    """Append-only operation log; insertion order is a topological order."""

    nodes: list[Node] = field(default_factory=list)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def min_kink_distance(self) -> float:
        return min((n.kink for n in self.nodes), default=np.inf)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Graph] = []


@contextlib.contextmanager
def record(graph: Graph | None = None) -> Iterator[Graph]:
    """Record differentiable operations into ``graph`` (a fresh one by default)."""
    g = Graph() if graph is None else graph
    _ACTIVE.append(g)
    try:
        yield g
    finally:
        _ACTIVE.pop()


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _check_finite(kind: str, arr: np.ndarray) -> None:
    # a finite sum rules out nan and inf; overflow alone falls through to the exact test
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind} produced non-finite values")


def _emit(kind, out, inputs, backward_fn, kink=np.inf) -> Tensor:
    _check_finite(kind, out)
    t = Tensor._wrap(out)
    g = active_graph()
    if g is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        refs = tuple(
            None if not x.requires_grad else (x.node if x.node is not None and x.graph is g else x)
            for x in inputs
        )
        t.graph = g
        t.node = g.append(Node(kind, refs, out.shape, backward_fn, kink))
    return t


class GradientMap:
    """Gradients of a scalar loss, keyed by leaf tensor.

    Leaves that the backward sweep never reached report an all-zero gradient.
    """

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        g = self._grads.get(id(leaf))
        if g is None:
            return np.zeros_like(leaf.data)
        return g

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def items(self):
        for key, leaf in self._leaves.items():
            yield leaf, self._grads[key]


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep over the loss's graph, returning leaf gradients."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.graph is None or loss.node is None:
        raise ValueError("loss is not connected to a recorded graph")
    nodes = loss.graph.nodes
    # gradient w.r.t. each node output, indexed by node id
    upstream: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for idx in range(loss.node, -1, -1):
        g_out = upstream.pop(idx, None)
        if g_out is None:
            continue
        node = nodes[idx]
        in_grads = node.backward(g_out)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or x is None:
                continue
            if isinstance(x, int):
                prev = upstream.get(x)
                upstream[x] = gx if prev is None else prev + gx
            else:
                key = id(x)
                prev = leaf_grads.get(key)
                leaf_grads[key] = gx if prev is None else prev + gx
                leaves[key] = x
    for key, g in leaf_grads.items():
        _check_finite("backward", g)
    return GradientMap(leaf_grads, leaves)


# ---------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit(
        "mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial dims of NCHW input; negative amounts crop instead."""
    if a.ndim != 4:
        raise DimensionError(f"pad2d needs NCHW input, got {a.shape}")
    h, w = a.shape[2:]
    if h + min(top, 0) + min(bottom, 0) < 1 or w + min(left, 0) + min(right, 0) < 1:
        raise DimensionError(f"pad2d: cropping removes every row or column of {a.shape}")
    crop = (slice(None), slice(None), slice(-min(top, 0), h + min(bottom, 0)), slice(-min(left, 0), w + min(right, 0)))
    pads = ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0)))
    out = np.pad(a.data[crop], pads)
    ho, wo = out.shape[2:]
    inner = (slice(None), slice(None), slice(pads[2][0], ho - pads[2][1]), slice(pads[3][0], wo - pads[3][1]))
    shape = a.shape  # closures must not hold tensors, see Node.inputs

    def bw(g):
        gx = np.zeros(shape)
        gx[crop] = g[inner]
        return (gx,)

    return _emit("pad2d", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    kink = float(np.abs(x).min()) if x.size else np.inf
    return _emit("relu", np.where(pos, x, 0.0), (a,), lambda g: (g * pos,), kink)


def clamp_min_per_channel(a: Tensor, margins) -> Tensor:
    """Elementwise ``max(x, m_c)`` with ``m_c`` taken from the element's channel.

    At exact ties the gradient passes through.
    """
    m = margins.data if isinstance(margins, Tensor) else np.asarray(margins, dtype=np.float64)
    if a.ndim != 4 or m.ndim != 1 or m.shape[0] != a.shape[1]:
        raise DimensionError(
            f"clamp_min_per_channel: {m.shape[0] if m.ndim == 1 else m.shape} margins "
            f"for input of shape {a.shape}"
        )
    mb = m.reshape(1, -1, 1, 1)
    x = a.data
    keep = x >= mb
    kink = float(np.abs(x - mb).min())
    return _emit(
        "clamp_min_per_channel", np.where(keep, x, mb), (a,), lambda g: (g * keep,), kink
    )


# ---------------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    has_bias = bias is not None

    def bw(g):
        return (g @ wd, g.T @ xd) + ((g.sum(axis=0),) if has_bias else ())

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs, bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _out_size(kind, size, k, stride, padding):
    span = size + 2 * padding - k
    if stride < 1 or span < 0 or span % stride:
        raise DimensionError(
            f"{kind}: extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [N, C, H', W', kh, kw] strided view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _fold(cols: np.ndarray, padded_shape, stride: int, padding: int) -> np.ndarray:
    """Scatter-add ``[N, C, H', W', kh, kw]`` window values back onto the input grid."""
    n, c, ho, wo, kh, kw = cols.shape
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _im2col(xt: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``[C, N, Hp, Wp]`` padded input to a ``[C*kh*kw, N*H'*W']`` patch matrix."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(gcols: np.ndarray, padded_shape, kh, kw, stride, ho, wo) -> np.ndarray:
    c, n = padded_shape[:2]
    gcols = gcols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} vs weight {weight.shape}")
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = _out_size("conv2d", h, kh, stride, padding)
    wo = _out_size("conv2d", w, kw, stride, padding)
    # channel-major layout keeps the patch copies contiguous
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    padded_shape = xt.shape
    wmat = weight.data.reshape(cout, -1)
    cols = _im2col(xt, kh, kw, stride, ho, wo)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    wshape, has_bias = weight.shape, bias is not None

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(wshape)
        gxt = _col2im(wmat.T @ gmat, padded_shape, kh, kw, stride, ho, wo)
        if padding:
            gxt = gxt[:, :, padding:-padding, padding:-padding]
        grads = (np.ascontiguousarray(gxt.transpose(1, 0, 2, 3)), gw)
        if has_bias:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, bw)


def pool2d(kind: str, x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling; max routes the gradient to the first maximal element."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 4:
        raise DimensionError(f"pool2d needs NCHW input, got {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    ho = _out_size("pool2d", h, window, stride, 0)
    wo = _out_size("pool2d", w, window, stride, 0)
    xd = x.data
    cols = _windows(xd, window, window, stride).reshape(n, c, ho, wo, window * window)
    if kind == "avg":
        out = cols.mean(axis=-1)
        area = float(window * window)

        def bw(g):
            spread = np.broadcast_to((g / area)[..., None, None], (n, c, ho, wo, window, window))
            return (_fold(spread, xd.shape, stride, 0),)

        return _emit("avg_pool2d", out, (x,), bw)

    arg = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]
    if window > 1:
        part = np.partition(cols, -2, axis=-1)
        kink = float((part[..., -1] - part[..., -2]).min())
    else:
        kink = np.inf

    def bw(g):
        onehot = np.zeros((n, c, ho, wo, window * window))
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        return (_fold(onehot.reshape(n, c, ho, wo, window, window), xd.shape, stride, 0),)

    return _emit("max_pool2d", out, (x,), bw, kink)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = TRAINING,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over N, H, W.

    In training mode the batch statistics normalize the input and, unless
    ``update_stats`` is false, are blended into ``running_mean`` and
    ``running_var`` in place (the running variance uses the unbiased batch
    variance).  Evaluation mode normalizes by the running statistics.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d needs NCHW input, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(t) != (c,):
            raise DimensionError(f"batchnorm2d: {name} has shape {np.shape(t)}, expected ({c},)")
    xd = x.data
    gd = gamma.data.reshape(1, -1, 1, 1)
    bd = beta.data.reshape(1, -1, 1, 1)
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if mode == TRAINING:
        if count < 2:
            raise DimensionError("batchnorm2d training mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = centered * inv_std
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(-1) * (count / (count - 1))

        def bw(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * gd
            gx = (inv_std / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, ggamma, gbeta

    elif mode == EVALUATION:
        inv_std = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + epsilon)
        xhat = (xd - running_mean.reshape(1, -1, 1, 1)) * inv_std

        def bw(g):
            return g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    return _emit("batchnorm2d", xhat * gd + bd, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# classification losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (float(g) / n),)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), bw)


def kl_divergence_softened(teacher_logits, student_logits: Tensor, temperature: float) -> Tensor:
    """Batch-mean KL(softmax(t / T) || softmax(s / T)); the teacher side is constant."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape or t.ndim != 2:
        raise DimensionError(f"kl_divergence_softened: {t.shape} vs {student_logits.shape}")
    n = t.shape[0]
    logp = log_softmax(t / temperature)
    logq = log_softmax(student_logits.data / temperature)
    p = np.exp(logp)
    kl = (p * (logp - logq)).sum() / n

    def bw(g):
        return ((np.exp(logq) - p) * (float(g) / (n * temperature)),)

    return _emit("kl_divergence_softened", np.array(kl), (student_logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    kink_distance: float

    def near_kink(self, tol: float = 1e-3) -> bool:
        return self.kink_distance < tol

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    f: Callable[[Tensor], Tensor], point, perturbation: float = 1e-5
) -> GradCheckResult:
    """Compare the analytic gradient of scalar ``f`` at ``point`` to central differences.

    The error per element is ``|a - c| / max(|a|, |c|, 1e-8)``.  The result also
    carries the smallest distance to a kink seen during the forward pass, so
    callers can discard points where the comparison is meaningless.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with record() as g:
        out = f(x)
    analytic = backward(out)[x]
    kink = g.min_kink_distance()

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + perturbation
        hi = f(Tensor._wrap(base)).item()
        flat[i] = orig - perturbation
        lo = f(Tensor._wrap(base)).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * perturbation)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float((np.abs(analytic - numeric) / denom).max())
    return GradCheckResult(err, kink)
