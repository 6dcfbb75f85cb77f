"""
Synthetic image pairs with known deformations and class labels.

Each moving image is a smooth annulus around a disk on a textured background.
The fixed image is the moving image pulled back through the exponential of
a class-specific velocity field, plus Gaussian noise.
"""
import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from cvae_model import ImagePair
from grid_field import (
    FieldKind, Grid, ScalarImage, Transform, VectorField, choose_scaling_N, exponentiate, max_norm,
    scale_field, smooth_array, warp_image, warp_mask,
)
from tensor_io import read_archive, write_archive

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
MASK_LABELS = ("disk", "annulus")
EDGE_WIDTH = 0.75
# Upper bound on |phi(x) - x|, in voxels.
MAX_DISPLACEMENT = 8.0


class DatasetError(ValueError):
    """Unreadable or empty dataset directory or manifest."""


class DeformationClass(Enum):
    CONTRACTION_STRONG = "contraction_strong"
    CONTRACTION_WEAK = "contraction_weak"
    ROTATION = "rotation"
    SHEAR = "shear"


CLASS_ORDER = list(DeformationClass)


def _ordered_range(value: Tuple[float, float]) -> Tuple[float, float]:
    if value[0] > value[1]:
        raise ValueError(f"range {value} is not ordered")
    return value


class SynthSpec(BaseModel):
    """Generator settings; radii and jitter are fractions of the smallest extent."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid_dims: Tuple[int, ...] = (64, 64)
    spacing: Optional[Tuple[float, ...]] = None
    noise_sigma: float = Field(default=0.02, ge=0)
    n_per_class: int = Field(default=50, ge=1)
    seed: int = 0
    contraction_strong: Tuple[float, float] = (0.30, 0.40)
    contraction_weak: Tuple[float, float] = (0.08, 0.16)
    rotation: Tuple[float, float] = (0.20, 0.35)
    shear: Tuple[float, float] = (0.20, 0.35)
    inner_radius: Tuple[float, float] = (0.13, 0.17)
    wall_thickness: Tuple[float, float] = (0.08, 0.11)
    centre_jitter: float = Field(default=0.06, ge=0, lt=0.2)
    texture_amplitude: float = Field(default=0.05, ge=0, le=0.2)

    @field_validator("contraction_strong", "contraction_weak", "rotation", "shear",
                     "inner_radius", "wall_thickness")
    @classmethod
    def _check_range(cls, value):
        return _ordered_range(value)

    @field_validator("grid_dims")
    @classmethod
    def _check_grid(cls, value):
        if len(value) not in (2, 3) or any(n < 16 for n in value):
            raise ValueError(f"grid_dims must be 2-D or 3-D with extents >= 16, got {value}")
        return value

    @property
    def grid(self) -> Grid:
        return Grid(self.grid_dims, self.spacing)

    def strength_range(self, label: DeformationClass) -> Tuple[float, float]:
        return getattr(self, label.value)


@dataclass
class SyntheticPair(ImagePair):
    """An ImagePair with its ground-truth transform and class."""
    phi: Optional[Transform] = None
    label: DeformationClass = DeformationClass.CONTRACTION_STRONG
    strength: float = 0.0
    index: int = 0

    @property
    def class_id(self) -> int:
        return CLASS_ORDER.index(self.label)

    @property
    def split(self) -> str:
        return "train" if self.index % 2 == 0 else "test"


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    filename: str
    class_id: int
    split: str


def _inside(r: np.ndarray, radius: float) -> np.ndarray:
    """Smooth indicator of r < radius."""
    return 0.5 * (1.0 - np.tanh((r - radius) / (2.0 * EDGE_WIDTH)))


def class_velocity(grid: Grid, label: DeformationClass, strength: float,
                   centre: np.ndarray, envelope: float) -> VectorField:
    """
    Velocity of one deformation class under a Gaussian envelope around `centre`.

    Contraction is an outward pull-back field so the structures of the fixed
    image appear smaller. Rotation and shear act in the plane of axes 0 and 1.
    """
    x = grid.identity_coordinates()
    offset = x - centre.reshape((grid.ndim,) + (1,) * grid.ndim)
    weight = np.exp(-np.sum(offset ** 2, axis=0) / (2.0 * envelope ** 2))
    v = np.zeros_like(offset)
    if label in (DeformationClass.CONTRACTION_STRONG, DeformationClass.CONTRACTION_WEAK):
        v[:2] = strength * offset[:2] * weight
    elif label == DeformationClass.ROTATION:
        v[0] = -strength * offset[1] * weight
        v[1] = strength * offset[0] * weight
    else:
        v[0] = strength * offset[1] * weight
    return VectorField.from_channels_first(grid, v, kind=FieldKind.VELOCITY)


def generate_pair(spec: SynthSpec, label: DeformationClass, rng: np.random.Generator,
                  strength: Optional[float] = None) -> SyntheticPair:
    """
    One (M, F) pair. `strength` overrides the drawn class parameter.

    Draw order: strength, inner radius, wall thickness, centre jitter, texture, noise.
    """
    grid = spec.grid
    extent = float(min(grid.dims))
    drawn = float(rng.uniform(*spec.strength_range(label)))
    strength = drawn if strength is None else float(strength)
    r_in = float(rng.uniform(*spec.inner_radius)) * extent
    r_out = r_in + float(rng.uniform(*spec.wall_thickness)) * extent
    jitter = rng.uniform(-1.0, 1.0, size=grid.ndim) * spec.centre_jitter * extent
    centre = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0 + jitter

    x = grid.identity_coordinates()
    r = np.sqrt(np.sum((x - centre.reshape((grid.ndim,) + (1,) * grid.ndim)) ** 2, axis=0))
    texture = smooth_array(rng.standard_normal(grid.dims), 4.0, 17, range(grid.ndim))
    texture = texture / max(float(np.max(np.abs(texture))), 1e-12)
    disk = _inside(r, r_in)
    annulus = _inside(r, r_out) - disk
    values = 0.1 + spec.texture_amplitude * texture + 0.8 * annulus + 0.45 * disk
    M = ScalarImage(grid, np.clip(values, 0.0, 1.0))
    moving_masks = {"disk": r < r_in, "annulus": (r >= r_in) & (r < r_out)}

    v = class_velocity(grid, label, strength, centre, envelope=r_out + 0.1 * extent)
    # |exp(v) - id| <= max |v|, so capping v caps the displacement
    peak = max_norm(v)
    if peak > MAX_DISPLACEMENT:
        logger.debug(f"{label.value} velocity peak {peak:.2f} capped at {MAX_DISPLACEMENT} voxels")
        v = scale_field(v, MAX_DISPLACEMENT / peak)
        strength *= MAX_DISPLACEMENT / peak
    phi = exponentiate(v, choose_scaling_N([v]))
    F_clean = warp_image(M, phi)
    noise = rng.standard_normal(grid.dims) * spec.noise_sigma
    F = ScalarImage(grid, np.clip(F_clean.values + noise, 0.0, 1.0))
    fixed_masks = {label_name: warp_mask(mask, phi) for label_name, mask in moving_masks.items()}

    return SyntheticPair(moving=M, fixed=F, moving_masks=moving_masks, fixed_masks=fixed_masks,
                         phi=phi, label=label, strength=strength)


def label_for_index(index: int) -> DeformationClass:
    """Every run of four indices covers each class once; the rotation keeps both splits balanced."""
    return CLASS_ORDER[(index + index // 4) % len(CLASS_ORDER)]


def generate_dataset(spec: SynthSpec) -> List[SyntheticPair]:
    """n_per_class pairs of every class; pair i is seeded by (seed, i)."""
    pairs = []
    for index in range(spec.n_per_class * len(CLASS_ORDER)):
        pair = generate_pair(spec, label_for_index(index), np.random.default_rng([spec.seed, index]))
        pair.index = index
        pairs.append(pair)
    logger.info(f"generated {len(pairs)} synthetic pairs on grid {spec.grid_dims}")
    return pairs


def split_pairs(pairs: List[SyntheticPair], split: str) -> List[SyntheticPair]:
    return [p for p in pairs if p.split == split]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def pair_filename(index: int) -> str:
    return f"pair_{index:04d}.bin"


def save_pair(path: Union[str, Path], pair: SyntheticPair) -> Path:
    tensors: Dict[str, np.ndarray] = {"moving": pair.moving.values, "fixed": pair.fixed.values}
    if pair.phi is not None:
        tensors["phi"] = pair.phi.displacement.vectors
    for name, mask in pair.moving_masks.items():
        tensors[f"moving_mask_{name}"] = mask.astype(np.float64)
    for name, mask in pair.fixed_masks.items():
        tensors[f"fixed_mask_{name}"] = mask.astype(np.float64)
    record = {
        "index": pair.index,
        "label": pair.label.value,
        "class_id": pair.class_id,
        "strength": pair.strength,
        "spacing": list(pair.moving.grid.spacing),
    }
    return write_archive(path, tensors, record)


def load_pair(path: Union[str, Path]) -> SyntheticPair:
    tensors, record = read_archive(path)
    if "moving" not in tensors or "fixed" not in tensors:
        raise DatasetError(f"{path} does not hold an image pair")
    grid = Grid(tensors["moving"].shape, tuple(record["spacing"]) if record.get("spacing") else None)
    phi = None
    if "phi" in tensors:
        phi = Transform(VectorField(grid, tensors["phi"]))

    def masks(prefix):
        return {name[len(prefix):]: tensors[name] > 0.5 for name in tensors if name.startswith(prefix)}

    return SyntheticPair(
        moving=ScalarImage(grid, tensors["moving"]),
        fixed=ScalarImage(grid, tensors["fixed"]),
        moving_masks=masks("moving_mask_"),
        fixed_masks=masks("fixed_mask_"),
        phi=phi,
        label=DeformationClass(record.get("label", CLASS_ORDER[0].value)),
        strength=float(record.get("strength", 0.0)),
        index=int(record.get("index", 0)),
    )


def save_dataset(pairs: List[SyntheticPair], directory: Union[str, Path]) -> Path:
    """One archive per pair plus manifest.csv (filename, class_id, split)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST
    with open(manifest, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["filename", "class_id", "split"])
        for pair in sorted(pairs, key=lambda p: p.index):
            save_pair(directory / pair_filename(pair.index), pair)
            writer.writerow([pair_filename(pair.index), pair.class_id, pair.split])
    logger.info(f"saved {len(pairs)} pairs to {directory}")
    return manifest


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    try:
        entries = [ManifestEntry(index=i, filename=row["filename"], class_id=int(row["class_id"]),
                                 split=row.get("split") or "")
                   for i, row in enumerate(rows)]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e
    if not entries:
        raise DatasetError(f"manifest {path} lists no pairs")
    return entries


def load_dataset(directory: Union[str, Path], split: Optional[str] = None) -> List[SyntheticPair]:
    directory = Path(directory)
    entries = read_manifest(directory / MANIFEST)
    pairs = [load_pair(directory / e.filename) for e in entries if split is None or e.split == split]
    if not pairs:
        raise DatasetError(f"no pairs for split {split!r} in {directory}")
    return pairs
