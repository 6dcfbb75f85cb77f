"""
Reverse-mode automatic differentiation over dense numpy tensors.

Only the operations the registration network needs are provided. Image-like
tensors are channel-first without a batch axis: (C, *spatial).
"""
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from grid_field import sample_linear, sample_linear_gradients, scatter_linear, smoothing_matrix

logger = logging.getLogger(__name__)


class AutodiffError(ValueError):
    """Shape mismatch or misuse of the graph."""


class Tensor:
    """A value in the computation graph."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    out.op = op
    if requires:
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(seed: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(seed: Tensor):
    """Accumulate d(seed)/d(t) into t.grad for every tensor that requires it."""
    if seed.size != 1:
        raise AutodiffError(f"backward needs a scalar seed, got shape {seed.shape}")
    if not seed.requires_grad:
        raise AutodiffError("seed does not depend on any tensor requiring gradients")
    order = _topological_order(seed)
    for node in order:
        if node is not seed and node._backward is not None:
            node.grad = None
    seed.grad = np.ones_like(seed.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(grad, dtype=np.float64)
            else:
                parent.grad = parent.grad + grad


# ---------------------------------------------------------------------------
# Elementwise algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return _node(a.data / b.data, (a, b), grad_fn, "div")


def square(a: Tensor) -> Tensor:
    return _node(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tensor_sum(a: Tensor) -> Tensor:
    return _node(np.sum(a.data), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.mean(a.data), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------

def same_padding(n: int, k: int, stride: int) -> Tuple[int, int, int]:
    """Output extent and (before, after) zero padding for same-padded strided correlation."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _geometry(spatial: Sequence[int], kernel: Sequence[int], stride: int):
    outs, pads = [], [(0, 0)]
    for n, k in zip(spatial, kernel):
        out, before, after = same_padding(n, k, stride)
        outs.append(out)
        pads.append((before, after))
    return tuple(outs), pads


def _windows(padded: np.ndarray, kernel: Sequence[int], stride: int, outs: Sequence[int]) -> np.ndarray:
    ndim = len(kernel)
    win = sliding_window_view(padded, tuple(kernel), axis=tuple(range(1, ndim + 1)))
    index = (slice(None),) + tuple(slice(0, (o - 1) * stride + 1, stride) for o in outs)
    return win[index]


def _correlate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Same-padded strided cross-correlation, (Cin, *n) x (Cout, Cin, *k) -> (Cout, *out)."""
    ndim = w.ndim - 2
    outs, pads = _geometry(x.shape[1:], w.shape[2:], stride)
    win = _windows(np.pad(x, pads), w.shape[2:], stride, outs)
    w_axes = list(range(1, ndim + 2))
    win_axes = [0] + list(range(ndim + 1, 2 * ndim + 1))
    return np.tensordot(w, win, axes=(w_axes, win_axes))


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, spatial: Sequence[int]) -> np.ndarray:
    """Adjoint of _correlate with respect to its input of extent `spatial`."""
    kernel = w.shape[2:]
    outs, pads = _geometry(spatial, kernel, stride)
    padded_shape = (w.shape[1],) + tuple(n + b + a for n, (b, a) in zip(spatial, pads[1:]))
    out = np.zeros(padded_shape, dtype=np.float64)
    for offset in itertools.product(*(range(k) for k in kernel)):
        contrib = np.tensordot(w[(slice(None), slice(None)) + offset], g, axes=([0], [0]))
        index = (slice(None),) + tuple(
            slice(o, o + (n - 1) * stride + 1, stride) for o, n in zip(offset, outs))
        out[index] += contrib
    crop = (slice(None),) + tuple(slice(b, b + n) for n, (b, _) in zip(spatial, pads[1:]))
    return out[crop]


def _correlate_weight_grad(x: np.ndarray, g: np.ndarray, kernel: Sequence[int], stride: int) -> np.ndarray:
    ndim = len(kernel)
    outs, pads = _geometry(x.shape[1:], kernel, stride)
    win = _windows(np.pad(x, pads), kernel, stride, outs)
    spatial_axes = list(range(1, ndim + 1))
    return np.tensordot(g, win, axes=(spatial_axes, spatial_axes))


def _bias_shape(bias: Tensor, ndim: int) -> Tuple[int, ...]:
    return (bias.shape[0],) + (1,) * ndim


def conv(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """D-dimensional same-padded cross-correlation."""
    ndim = weights.data.ndim - 2
    if x.data.ndim != ndim + 1 or x.shape[0] != weights.shape[1]:
        raise AutodiffError(f"conv input {x.shape} does not fit weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise AutodiffError(f"conv bias {bias.shape} does not fit weights {weights.shape}")
    out = _correlate(x.data, weights.data, stride) + bias.data.reshape(_bias_shape(bias, ndim))

    def grad_fn(g):
        return (
            _correlate_adjoint(g, weights.data, stride, x.shape[1:]),
            _correlate_weight_grad(x.data, g, weights.shape[2:], stride),
            g.sum(axis=tuple(range(1, ndim + 1))),
        )

    return _node(out, (x, weights, bias), grad_fn, "conv")


def deconv(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """
    Transposed convolution: the adjoint of conv with the same kernel.

    weights has the conv layout (Cin_of_deconv, Cout_of_deconv, *k); the spatial
    extent grows by `stride`.
    """
    ndim = weights.data.ndim - 2
    if x.data.ndim != ndim + 1 or x.shape[0] != weights.shape[0]:
        raise AutodiffError(f"deconv input {x.shape} does not fit weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise AutodiffError(f"deconv bias {bias.shape} does not fit weights {weights.shape}")
    spatial = tuple(n * stride for n in x.shape[1:])
    out = _correlate_adjoint(x.data, weights.data, stride, spatial)
    out = out + bias.data.reshape(_bias_shape(bias, ndim))

    def grad_fn(g):
        return (
            _correlate(g, weights.data, stride),
            _correlate_weight_grad(g, x.data, weights.shape[2:], stride),
            g.sum(axis=tuple(range(1, ndim + 1))),
        )

    return _node(out, (x, weights, bias), grad_fn, "deconv")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map W x + b on a vector."""
    if x.data.ndim != 1 or weights.shape[1] != x.shape[0] or bias.shape != (weights.shape[0],):
        raise AutodiffError(f"dense shapes do not fit: x {x.shape}, W {weights.shape}, b {bias.shape}")
    out = weights.data @ x.data + bias.data
    return _node(out, (x, weights, bias),
                 lambda g: (weights.data.T @ g, np.outer(g, x.data), g), "dense")


class Activation(Enum):
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


def activation(x: Tensor, kind: Activation = Activation.LEAKY_RELU, slope: float = 0.2) -> Tensor:
    if kind == Activation.IDENTITY:
        return _node(x.data.copy(), (x,), lambda g: (g,), "identity")
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return _node(out, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def grad_fn(g):
        first, second = np.split(g, [split], axis=axis)
        return first, second

    return _node(out, (a, b), grad_fn, "concat")


def downsample(x: Tensor, factor: int) -> Tensor:
    """Average pooling with window = stride = factor over the spatial axes."""
    if factor == 1:
        return _node(x.data.copy(), (x,), lambda g: (g,), "downsample")
    spatial = x.shape[1:]
    if any(n % factor for n in spatial):
        raise AutodiffError(f"spatial extent {spatial} not divisible by {factor}")
    blocked = (x.shape[0],) + tuple(itertools.chain.from_iterable((n // factor, factor) for n in spatial))
    block_axes = tuple(range(2, 2 * len(spatial) + 1, 2))
    out = x.data.reshape(blocked).mean(axis=block_axes)
    volume = factor ** len(spatial)

    def grad_fn(g):
        expanded = np.expand_dims(g, block_axes) / volume
        return (np.broadcast_to(expanded, blocked).reshape(x.shape),)

    return _node(out, (x,), grad_fn, "downsample")


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, noise supplied by the caller."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape or logvar.shape != mu.shape:
        raise AutodiffError(f"reparameterize shapes differ: {mu.shape}, {logvar.shape}, {noise.shape}")
    sigma = np.exp(0.5 * logvar.data)
    return _node(mu.data + sigma * noise, (mu, logvar),
                 lambda g: (g, 0.5 * g * sigma * noise), "reparameterize")


def _identity_coordinates(spatial: Sequence[int]) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in spatial]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def warp_node(img: Tensor, displacement: Tensor) -> Tensor:
    """Differentiable multilinear warp of img (C, *dims) by x + u(x), u of shape (D, *dims)."""
    spatial = img.shape[1:]
    if displacement.shape != (len(spatial),) + spatial:
        raise AutodiffError(f"displacement {displacement.shape} does not fit image {img.shape}")
    if not np.all(np.isfinite(displacement.data)):
        raise AutodiffError("displacement contains non-finite values")
    coords = _identity_coordinates(spatial) + displacement.data
    out = sample_linear(img.data, coords)

    def grad_fn(g):
        d_img = scatter_linear(g, coords, spatial) if img.requires_grad else None
        d_disp = None
        if displacement.requires_grad:
            d_disp = np.sum(sample_linear_gradients(img.data, coords) * g[np.newaxis], axis=1)
        return d_img, d_disp

    return _node(out, (img, displacement), grad_fn, "warp")


@lru_cache(maxsize=64)
def _cached_smoothing_matrix(n: int, sigma: float, kernel_size: int) -> np.ndarray:
    matrix = smoothing_matrix(n, sigma, kernel_size)
    matrix.setflags(write=False)
    return matrix


def _apply_axes(values: np.ndarray, matrices: Sequence[np.ndarray]) -> np.ndarray:
    out = values
    for axis, matrix in enumerate(matrices, start=1):
        out = np.moveaxis(np.tensordot(matrix, out, axes=([1], [axis])), 0, axis)
    return out


def smooth(x: Tensor, sigma: float, kernel_size: int) -> Tensor:
    """Edge-replicated separable Gaussian smoothing of every channel."""
    matrices = [_cached_smoothing_matrix(n, float(sigma), int(kernel_size)) for n in x.shape[1:]]
    out = _apply_axes(x.data, matrices)
    return _node(out, (x,), lambda g: (_apply_axes(g, [m.T for m in matrices]),), "smooth")


def compose_node(outer: Tensor, inner: Tensor) -> Tensor:
    """Displacement of outer o inner."""
    return add(inner, warp_node(outer, inner))


def exponentiate_node(velocity: Tensor, steps: int) -> Tensor:
    """Scaling and squaring inside the graph; returns the displacement of exp(v)."""
    u = mul(velocity, 2.0 ** -steps)
    for _ in range(steps):
        u = compose_node(u, u)
    return u


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    """Central-difference comparison of analytic gradients."""
    max_relative_error: float
    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                   tolerance: float = 1e-4, entries: Optional[int] = None, seed: int = 0,
                   floor: float = 1e-6,
                   analytic: Optional[Sequence[np.ndarray]] = None) -> GradientCheckReport:
    """
    Compare analytic gradients of the scalar f() with central differences.

    The relative error of each entry is |a - n| / max(|a|, |n|, floor). With
    `entries` set, that many random entries are checked per parameter, otherwise
    all entries. `analytic` overrides the backward pass (negative controls).
    """
    if analytic is None:
        for p in params:
            p.zero_grad()
        backward(f())
        analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    rng = np.random.default_rng(seed)
    report = GradientCheckReport(max_relative_error=0.0, tolerance=tolerance)
    for number, (p, grad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        grad = np.asarray(grad, dtype=np.float64).reshape(-1)
        if entries is None or entries >= flat.size:
            indices = range(flat.size)
        else:
            indices = rng.choice(flat.size, size=entries, replace=False)
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            upper = f().item()
            flat[i] = original - step
            lower = f().item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * step)
            error = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), floor)
            worst = max(worst, error)
        report.per_parameter[p.name or f"param_{number}"] = worst
        report.max_relative_error = max(report.max_relative_error, worst)
    logger.debug(f"gradient check max relative error {report.max_relative_error:.3e}")
    return report


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))
