"""
Uses of the deformation encoding: sampling, transport between subjects,
discriminative CCA of z-codes and nearest-centroid classification.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from cvae_model import CvaeRegistrationModel, LatentCode, RegistrationResult
from grid_field import ScalarImage

logger = logging.getLogger(__name__)

CCA_RIDGE = 1e-6


class CcaError(ValueError):
    """Degenerate covariance or invalid component count."""


def sample_deformation(model: CvaeRegistrationModel, M: ScalarImage,
                       rng: Optional[np.random.Generator] = None,
                       z: Optional[np.ndarray] = None) -> RegistrationResult:
    """Decode a prior draw z ~ N(0, I) (or the given z) conditioned on M."""
    d = model.config.latent_dim
    if z is None:
        if rng is None:
            raise ValueError("sampling needs a seeded generator or an explicit z")
        z = rng.standard_normal(d)
    z = np.asarray(z, dtype=np.float64)
    return model.realize(z, M, latent=LatentCode(z=z, mu=np.zeros(d), logvar=np.zeros(d)))


def transport(model: CvaeRegistrationModel, z_source: np.ndarray, M_target: ScalarImage,
              F_target: Optional[ScalarImage] = None) -> RegistrationResult:
    """Apply a deformation code captured on one subject to another subject's image."""
    z = np.asarray(z_source, dtype=np.float64)
    latent = LatentCode(z=z, mu=z, logvar=np.zeros_like(z))
    return model.realize(z, M_target, F_target, latent=latent)


# ---------------------------------------------------------------------------
# Canonical correlation analysis against class indicators
# ---------------------------------------------------------------------------

@dataclass
class CcaModel:
    """Projection of z-codes onto the most class-discriminative directions."""
    basis: np.ndarray          # (d, c)
    correlations: np.ndarray   # (c,), non-increasing
    mean: np.ndarray           # (d,)
    classes: np.ndarray        # sorted class ids
    centroids: np.ndarray      # (n_classes, c)

    @property
    def components(self) -> int:
        return self.basis.shape[1]


def _indicators(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """One-hot class matrix without the last column, which is implied by the others."""
    onehot = (labels[:, np.newaxis] == classes[np.newaxis, :]).astype(np.float64)
    return onehot[:, :-1]


def cca_fit(Z: np.ndarray, labels: Sequence[int], components: int) -> CcaModel:
    """
    Fit discriminative CCA between z-codes Z (n, d) and class labels.

    Solves Cxy Cyy^-1 Cyx w = rho^2 Cxx w on ridge-regularized covariances,
    orders directions by descending correlation and fixes each sign so the
    largest-magnitude coefficient is positive.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = Z.shape
    classes = np.unique(labels)
    if len(labels) != n:
        raise CcaError(f"{len(labels)} labels for {n} codes")
    if len(classes) < 2:
        raise CcaError("CCA needs at least two classes")
    if n <= len(classes):
        raise CcaError(f"need more samples ({n}) than classes ({len(classes)})")
    if not 1 <= components <= min(d, len(classes) - 1):
        raise CcaError(f"components must be in [1, {min(d, len(classes) - 1)}], got {components}")

    mean = Z.mean(axis=0)
    X = Z - mean
    Y = _indicators(labels, classes)
    Y = Y - Y.mean(axis=0)
    cxx = X.T @ X / n + CCA_RIDGE * np.eye(d)
    cyy = Y.T @ Y / n + CCA_RIDGE * np.eye(Y.shape[1])
    cxy = X.T @ Y / n
    try:
        A = cxy @ scipy.linalg.solve(cyy, cxy.T, assume_a="pos")
        eigenvalues, vectors = scipy.linalg.eigh((A + A.T) / 2.0, cxx)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise CcaError(f"degenerate covariance: {e}") from e

    order = np.argsort(eigenvalues)[::-1][:components]
    basis = vectors[:, order]
    for j in range(components):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] = -basis[:, j]
    correlations = np.sqrt(np.clip(eigenvalues[order], 0.0, 1.0))

    projected = X @ basis
    centroids = np.stack([projected[labels == c].mean(axis=0) for c in classes])
    return CcaModel(basis=basis, correlations=correlations, mean=mean, classes=classes, centroids=centroids)


def cca_project(model: CcaModel, z: np.ndarray) -> np.ndarray:
    """Basis-transpose times centred z; accepts a single code (d,) or a stack (n, d)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.mean.shape[0]:
        raise CcaError(f"code dimension {z.shape[-1]} does not match {model.mean.shape[0]}")
    return (z - model.mean) @ model.basis


def nearest_centroid(model: CcaModel, projected: np.ndarray) -> int:
    distances = np.linalg.norm(model.centroids - projected[np.newaxis, :], axis=1)
    return int(model.classes[int(np.argmin(distances))])


def classify_nearest_centroid(model: CcaModel, z: np.ndarray) -> int:
    """Class whose projected centroid is closest to the projection of z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != model.mean.shape:
        raise CcaError(f"code has shape {z.shape}, expected {model.mean.shape}")
    return nearest_centroid(model, cca_project(model, z))


@dataclass
class CrossValidationResult:
    accuracy: float
    fold_accuracies: List[float] = field(default_factory=list)
    evaluated: int = 0


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample from a seeded permutation."""
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % folds
    return assignment


def cross_validate_nearest_centroid(Z: np.ndarray, labels: Sequence[int], components: int,
                                    folds: int = 10, seed: int = 0) -> CrossValidationResult:
    """k-fold accuracy of CCA + nearest centroid, refitting CCA on every training fold."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if folds < 2 or folds > len(labels):
        raise CcaError(f"folds must be in [2, {len(labels)}], got {folds}")
    assignment = fold_assignment(len(labels), folds, seed)
    correct = total = 0
    result = CrossValidationResult(accuracy=0.0)
    for k in range(folds):
        test = assignment == k
        try:
            model = cca_fit(Z[~test], labels[~test], components)
        except CcaError as e:
            logger.warning(f"fold {k} skipped: {e}")
            continue
        predictions = [nearest_centroid(model, p) for p in cca_project(model, Z[test])]
        hits = int(np.sum(np.asarray(predictions) == labels[test]))
        result.fold_accuracies.append(hits / int(test.sum()))
        correct += hits
        total += int(test.sum())
    if total == 0:
        raise CcaError("every fold was degenerate")
    result.accuracy = correct / total
    result.evaluated = total
    return result


def write_projection_table(path: Union[str, Path], projected: np.ndarray, labels: Sequence[int]) -> Path:
    """One row per subject: label then the projected coordinates."""
    path = Path(path)
    projected = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label"] + [f"cca_{j + 1}" for j in range(projected.shape[1])])
        for label, row in zip(labels, projected):
            writer.writerow([int(label)] + [f"{value:.9g}" for value in row])
    return path
