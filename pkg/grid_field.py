"""
Dense scalar and vector fields on regular grids.

Images are stored axis-major; vector fields keep their D components in the
last axis, in voxel units. Transforms are displacement fields: phi(x) = x + u(x).
"""
import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# Maximum per-voxel displacement allowed after scaling, in voxels.
SCALING_THRESHOLD = 0.5
DEFAULT_SCALING_STEPS = 4


class GridError(ValueError):
    """Invalid grid, field or operator argument."""


class GridMismatchError(GridError):
    """Operands live on different grids."""


class FieldKind(Enum):
    """Interpretation of a vector field."""
    VELOCITY = "velocity"
    DISPLACEMENT = "displacement"


@dataclass(frozen=True)
class Grid:
    """Regular D-dimensional grid."""
    dims: Tuple[int, ...]
    spacing: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = self.spacing if self.spacing is not None else (1.0,) * len(dims)
        spacing = tuple(float(s) for s in spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

        if len(dims) not in (2, 3):
            raise GridError(f"grid must be 2-D or 3-D, got {len(dims)} axes")
        if len(spacing) != len(dims):
            raise GridError(f"spacing {spacing} does not match dims {dims}")
        if any(n < 2 for n in dims):
            raise GridError(f"all dims must be >= 2, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise GridError(f"all spacings must be > 0, got {spacing}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def identity_coordinates(self) -> np.ndarray:
        """Index coordinates of every voxel, shape (D, *dims)."""
        axes = [np.arange(n, dtype=np.float64) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"))


@dataclass(frozen=True)
class ScalarImage:
    """One real intensity per voxel."""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.dims:
            raise GridError(f"image shape {values.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(values)):
            raise GridError("image contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class VectorField:
    """One D-vector per voxel (voxel units), components in the last axis."""
    grid: Grid
    vectors: np.ndarray
    kind: FieldKind = FieldKind.DISPLACEMENT

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        expected = self.grid.dims + (self.grid.ndim,)
        if vectors.shape != expected:
            raise GridError(f"field shape {vectors.shape} does not match {expected}")
        if not np.all(np.isfinite(vectors)):
            raise GridError("field contains non-finite components")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    def channels_first(self) -> np.ndarray:
        """Components moved to the leading axis, shape (D, *dims)."""
        return np.moveaxis(self.vectors, -1, 0)

    @classmethod
    def from_channels_first(cls, grid: Grid, components: np.ndarray,
                            kind: FieldKind = FieldKind.DISPLACEMENT) -> "VectorField":
        return cls(grid=grid, vectors=np.moveaxis(np.asarray(components), 0, -1), kind=kind)


@dataclass(frozen=True)
class Transform:
    """Dense mapping phi(x) = x + u(x)."""
    displacement: VectorField

    def __post_init__(self):
        if self.displacement.kind != FieldKind.DISPLACEMENT:
            raise GridError("a transform must wrap a displacement field")

    @property
    def grid(self) -> Grid:
        return self.displacement.grid


Field = Union[ScalarImage, VectorField]


def _check_same_grid(*grids: Grid):
    first = grids[0]
    for other in grids[1:]:
        if other != first:
            raise GridMismatchError(f"grid {other.dims} spacing {other.spacing} does not match "
                                    f"{first.dims} spacing {first.spacing}")


# ---------------------------------------------------------------------------
# Multilinear sampling with border clamping
# ---------------------------------------------------------------------------

def linear_stencil(coords: np.ndarray, dims: Sequence[int]):
    """
    Lower corner indices and fractional offsets for multilinear sampling.

    Coordinates are clamped to [0, n-1] per axis. `inside` marks the samples
    whose coordinate was not clamped, i.e. where the sample depends on it.
    """
    lower, frac, inside = [], [], []
    for axis, n in enumerate(dims):
        c = coords[axis]
        clamped = np.clip(c, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(clamped).astype(np.intp), n - 2)
        lower.append(i0)
        frac.append(clamped - i0)
        inside.append((c >= 0.0) & (c <= n - 1.0))
    return lower, frac, inside


def sample_linear(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Sample channel-first values (C, *dims) at index coordinates (D, *out).

    Returns (C, *out).
    """
    ndim = coords.shape[0]
    dims = values.shape[1:]
    lower, frac, _ = linear_stencil(coords, dims)
    out = np.zeros((values.shape[0],) + coords.shape[1:], dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=ndim):
        index = tuple(lower[a] + corner[a] for a in range(ndim))
        weight = np.ones(coords.shape[1:], dtype=np.float64)
        for a in range(ndim):
            weight = weight * (frac[a] if corner[a] else 1.0 - frac[a])
        out += weight * values[(slice(None),) + index]
    return out


def sample_linear_gradients(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Derivative of sample_linear with respect to each coordinate.

    Returns (D, C, *out); zero where the coordinate was clamped.
    """
    ndim = coords.shape[0]
    dims = values.shape[1:]
    lower, frac, inside = linear_stencil(coords, dims)
    grads = np.zeros((ndim, values.shape[0]) + coords.shape[1:], dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=ndim):
        index = tuple(lower[a] + corner[a] for a in range(ndim))
        corner_values = values[(slice(None),) + index]
        for d in range(ndim):
            weight = np.where(inside[d], 1.0 if corner[d] else -1.0, 0.0)
            for a in range(ndim):
                if a != d:
                    weight = weight * (frac[a] if corner[a] else 1.0 - frac[a])
            grads[d] += weight * corner_values
    return grads


def scatter_linear(upstream: np.ndarray, coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Adjoint of sample_linear with respect to the sampled values."""
    ndim = coords.shape[0]
    channels = upstream.shape[0]
    lower, frac, _ = linear_stencil(coords, dims)
    size = int(np.prod(dims))
    out = np.zeros((channels, size), dtype=np.float64)
    flat_upstream = upstream.reshape(channels, -1)
    for corner in itertools.product((0, 1), repeat=ndim):
        index = tuple((lower[a] + corner[a]).ravel() for a in range(ndim))
        flat_index = np.ravel_multi_index(index, tuple(dims))
        weight = np.ones(flat_index.shape, dtype=np.float64)
        for a in range(ndim):
            f = frac[a].ravel()
            weight = weight * (f if corner[a] else 1.0 - f)
        for c in range(channels):
            out[c] += np.bincount(flat_index, weights=weight * flat_upstream[c], minlength=size)
    return out.reshape((channels,) + tuple(dims))


# ---------------------------------------------------------------------------
# Warping, composition and the exponential map
# ---------------------------------------------------------------------------

def identity_transform(grid: Grid) -> Transform:
    """phi = id."""
    return Transform(VectorField(grid, np.zeros(grid.dims + (grid.ndim,))))


def warp_image(img: ScalarImage, phi: Transform) -> ScalarImage:
    """Resample img at phi(x) with multilinear interpolation."""
    _check_same_grid(img.grid, phi.grid)
    coords = img.grid.identity_coordinates() + phi.displacement.channels_first()
    warped = sample_linear(img.values[np.newaxis], coords)[0]
    return ScalarImage(img.grid, warped)


def warp_mask(mask: np.ndarray, phi: Transform) -> np.ndarray:
    """Nearest-neighbour resampling of a binary mask by phi."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != phi.grid.dims:
        raise GridMismatchError(f"mask shape {mask.shape} does not match {phi.grid.dims}")
    coords = phi.grid.identity_coordinates() + phi.displacement.channels_first()
    index = tuple(
        np.clip(np.rint(coords[a]), 0, n - 1).astype(np.intp)
        for a, n in enumerate(phi.grid.dims)
    )
    return mask[index]


def compose_displacements(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """u_inner(x) + u_outer(x + u_inner(x)) on channel-first arrays (D, *dims)."""
    dims = inner.shape[1:]
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij")) + inner
    return inner + sample_linear(outer, coords)


def compose(outer: Transform, inner: Transform) -> Transform:
    """Return outer o inner."""
    _check_same_grid(outer.grid, inner.grid)
    u = compose_displacements(outer.displacement.channels_first(),
                              inner.displacement.channels_first())
    return Transform(VectorField.from_channels_first(inner.grid, u))


def exponentiate(v: VectorField, steps: int = DEFAULT_SCALING_STEPS) -> Transform:
    """
    Scaling and squaring: phi_0 = id + v / 2**steps, then phi_k = phi_{k-1} o phi_{k-1}.
    """
    if v.kind != FieldKind.VELOCITY:
        raise GridError(f"exponentiate needs a velocity field, got a {v.kind.value} field")
    if steps < 0:
        raise GridError(f"scaling steps must be >= 0, got {steps}")
    u = v.channels_first() * (2.0 ** -steps)
    for _ in range(steps):
        u = compose_displacements(u, u)
    return Transform(VectorField.from_channels_first(v.grid, u))


def scale_field(v: VectorField, factor: float) -> VectorField:
    return VectorField(v.grid, v.vectors * factor, kind=v.kind)


def max_norm(v: VectorField) -> float:
    return float(np.max(np.linalg.norm(v.vectors, axis=-1)))


def choose_scaling_N(samples: List[VectorField]) -> int:
    """Smallest N >= 0 with max |v| * 2**-N <= 0.5 voxel over all samples."""
    if not samples:
        raise GridError("choose_scaling_N needs at least one sample field")
    largest = max(max_norm(v) for v in samples)
    steps = 0
    while largest * 2.0 ** -steps > SCALING_THRESHOLD:
        steps += 1
    logger.debug(f"max velocity norm {largest:.4f} voxels -> {steps} scaling steps")
    return steps


def inverse_consistency_error(v: VectorField, steps: int, margin: int = 2) -> float:
    """Interior max-norm deviation of exp(v) o exp(-v) from the identity."""
    forward = exponentiate(v, steps)
    backward = exponentiate(scale_field(v, -1.0), steps)
    residual = compose(forward, backward).displacement.vectors
    interior = tuple(slice(margin, n - margin) for n in v.grid.dims)
    return float(np.max(np.linalg.norm(residual[interior], axis=-1)))


# ---------------------------------------------------------------------------
# Gaussian smoothing
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float, kernel_size: int) -> np.ndarray:
    """Truncated 1-D Gaussian, renormalized to sum 1."""
    if sigma <= 0:
        raise GridError(f"sigma must be > 0, got {sigma}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise GridError(f"kernel size must be odd and >= 1, got {kernel_size}")
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return weights / weights.sum()


def smoothing_matrix(n: int, sigma: float, kernel_size: int) -> np.ndarray:
    """(n, n) operator applying the edge-replicated 1-D Gaussian along one axis."""
    weights = gaussian_kernel(sigma, kernel_size)
    return ndimage.correlate1d(np.eye(n), weights, axis=0, mode="nearest")


def smooth_array(values: np.ndarray, sigma: float, kernel_size: int,
                 spatial_axes: Sequence[int]) -> np.ndarray:
    """Separable Gaussian smoothing of `values` over the given axes."""
    weights = gaussian_kernel(sigma, kernel_size)
    out = np.asarray(values, dtype=np.float64)
    for axis in spatial_axes:
        out = ndimage.correlate1d(out, weights, axis=axis, mode="nearest")
    return out


def gaussian_smooth(fld: Field, sigma: float, kernel_size: int) -> Field:
    """Smooth every component of an image or vector field."""
    axes = range(fld.grid.ndim)
    if isinstance(fld, ScalarImage):
        return ScalarImage(fld.grid, smooth_array(fld.values, sigma, kernel_size, axes))
    return VectorField(fld.grid, smooth_array(fld.vectors, sigma, kernel_size, axes), kind=fld.kind)


# ---------------------------------------------------------------------------
# Jacobian analysis
# ---------------------------------------------------------------------------

def displacement_gradient(u: VectorField) -> np.ndarray:
    """du_i/dx_a by central differences (one-sided at borders), shape (*dims, D, D)."""
    ndim = u.grid.ndim
    grad = np.empty(u.grid.dims + (ndim, ndim), dtype=np.float64)
    for i in range(ndim):
        for a in range(ndim):
            grad[..., i, a] = np.gradient(u.vectors[..., i], axis=a)
    return grad


def jacobian_map(phi: Transform) -> ScalarImage:
    """Per-voxel determinant of the Jacobian of phi."""
    ndim = phi.grid.ndim
    jac = displacement_gradient(phi.displacement) + np.eye(ndim)
    return ScalarImage(phi.grid, np.linalg.det(jac))


def negative_jacobian_fraction(phi: Transform) -> float:
    """Fraction of voxels where phi folds."""
    return float(np.mean(jacobian_map(phi).values < 0.0))


def normalize_intensity(img: ScalarImage) -> ScalarImage:
    """Min-max normalization to [0, 1]; constant images map to zeros."""
    lo, hi = float(img.values.min()), float(img.values.max())
    if hi - lo <= 0.0:
        return ScalarImage(img.grid, np.zeros(img.grid.dims))
    return ScalarImage(img.grid, (img.values - lo) / (hi - lo))
