"""
Batch evaluation of a trained model over a dataset manifest.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from cvae_model import CvaeRegistrationModel
from latent_analysis import CcaError, cca_fit, cca_project, cross_validate_nearest_centroid
from synth_data import DatasetError, ManifestEntry, load_pair, read_manifest

logger = logging.getLogger(__name__)

PROJECTION_COMPONENTS = 2
CLASSIFICATION_COMPONENTS = 6
CV_FOLDS = 10


@dataclass
class CaseResult:
    """Metrics and posterior mean of one manifest entry."""
    index: int
    class_id: int
    metrics: Dict[str, float]
    mu: np.ndarray


@dataclass
class EvaluationReport:
    cases: List[CaseResult]
    aggregate: Dict[str, float]
    projection: Optional[np.ndarray] = None
    correlations: Optional[np.ndarray] = None
    accuracy: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def labels(self) -> List[int]:
        return [case.class_id for case in self.cases]

    def as_metrics(self) -> Dict[str, float]:
        """Flat report: case count, metric means and variances, CCA results."""
        report: Dict[str, float] = {"n_cases": len(self.cases)}
        report.update(self.aggregate)
        if self.correlations is not None:
            for j, rho in enumerate(self.correlations):
                report[f"cca_correlation_{j + 1}"] = float(rho)
        if self.accuracy is not None:
            report["accuracy"] = self.accuracy
        return report


def aggregate_metrics(per_case: List[Dict[str, float]]) -> Dict[str, float]:
    """Mean and population variance of every metric over the cases that report it."""
    keys = sorted({key for metrics in per_case for key in metrics})
    aggregate = {}
    for key in keys:
        values = np.array([metrics[key] for metrics in per_case if key in metrics], dtype=np.float64)
        aggregate[f"{key}_mean"] = float(values.mean())
        aggregate[f"{key}_var"] = float(values.var())
    return aggregate


class ManifestEvaluator:
    """Registers every manifest entry and summarizes the encoding."""

    def __init__(self, model: CvaeRegistrationModel, workers: int = 1, record_wall_time: bool = True,
                 folds: int = CV_FOLDS, seed: int = 0):
        self.model = model
        self.workers = max(1, workers)
        self.record_wall_time = record_wall_time
        self.folds = folds
        self.seed = seed

    def _evaluate_entry(self, directory: Path, entry: ManifestEntry) -> CaseResult:
        pair = load_pair(directory / entry.filename)
        result = self.model.register(pair.moving, pair.fixed, moving_masks=pair.moving_masks,
                                     fixed_masks=pair.fixed_masks)
        metrics = dict(result.metrics)
        metrics["wall_ms"] = result.wall_ms if self.record_wall_time else 0.0
        return CaseResult(index=entry.index, class_id=entry.class_id, metrics=metrics, mu=result.latent.mu)

    def evaluate(self, manifest: Union[str, Path], split: Optional[str] = None) -> EvaluationReport:
        """
        Evaluate all entries of `manifest` (optionally one split).

        Args:
            manifest: path to manifest.csv; pair archives live next to it
            split: "train", "test" or None for every entry

        Returns:
            EvaluationReport with cases sorted by manifest index
        """
        manifest = Path(manifest)
        entries = [e for e in read_manifest(manifest) if split is None or e.split == split]
        if not entries:
            raise DatasetError(f"manifest {manifest} has no entries for split {split!r}")

        directory = manifest.parent
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            cases = list(pool.map(lambda e: self._evaluate_entry(directory, e), entries))
        cases.sort(key=lambda c: c.index)
        logger.info(f"registered {len(cases)} manifest entries")

        report = EvaluationReport(cases=cases, aggregate=aggregate_metrics([c.metrics for c in cases]))
        self._analyze_codes(report)
        return report

    def _analyze_codes(self, report: EvaluationReport):
        Z = np.stack([c.mu for c in report.cases])
        labels = np.asarray(report.labels)
        n_classes = len(np.unique(labels))
        d = Z.shape[1]
        try:
            visual = cca_fit(Z, labels, min(PROJECTION_COMPONENTS, n_classes - 1, d))
            report.projection = cca_project(visual, Z)
            report.correlations = visual.correlations
            components = min(CLASSIFICATION_COMPONENTS, n_classes - 1, d)
            folds = min(self.folds, len(labels))
            report.accuracy = cross_validate_nearest_centroid(Z, labels, components, folds, self.seed).accuracy
        except CcaError as e:
            message = f"encoding analysis skipped: {e}"
            logger.warning(message)
            report.warnings.append(message)

    @staticmethod
    def get_summary_text(report: EvaluationReport) -> str:
        """Human-readable summary of an evaluation."""
        aggregate = report.aggregate
        lines = [f"Evaluated {len(report.cases)} pair(s):"]
        for key in ("lcc", "rmse", "dice_disk", "neg_jac_fraction"):
            if f"{key}_mean" in aggregate:
                lines.append(f"• {key}: {aggregate[f'{key}_mean']:.4f} (var {aggregate[f'{key}_var']:.2e})")
        if report.accuracy is not None:
            lines.append(f"• nearest-centroid accuracy: {report.accuracy:.3f}")
        for warning in report.warnings:
            lines.append(f"⚠ {warning}")
        return "\n".join(lines)
