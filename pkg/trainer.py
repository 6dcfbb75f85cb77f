"""
Training loop: Adam with L2 weight decay, online augmentation, checkpoints and loss log.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import AutodiffError, backward
from config import AugmentationConfig, TrainConfig
from cvae_model import CvaeRegistrationModel, ImagePair
from grid_field import Grid, Transform, VectorField, warp_image, warp_mask
from tensor_io import write_archive

logger = logging.getLogger(__name__)

LOSS_LOG = "loss_log.txt"


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, snapshot: Optional[Path], reason: str):
        self.step = step
        self.snapshot = snapshot
        where = f", snapshot at {snapshot}" if snapshot else ""
        super().__init__(f"step {step}: {reason}{where}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First and second moment estimates per parameter."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    weight_decay adds wd * theta to each gradient (coupled L2). Inputs are not
    modified; new parameter and state dictionaries are returned.
    """
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != theta.shape:
            raise ValueError(f"gradient of {name} has shape {grad.shape}, parameter has {theta.shape}")
        if weight_decay:
            grad = grad + weight_decay * theta
        m = beta1 * state.m[name] + (1.0 - beta1) * grad
        v = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationDraw:
    """One random similarity transform with mirroring, in voxel units."""
    angle: float
    scale: float
    shift: Tuple[float, ...]
    mirror: Tuple[bool, ...]


def draw_augmentation(rng: np.random.Generator, config: AugmentationConfig, grid: Grid) -> AugmentationDraw:
    """Draws angle, scale, per-axis shift and per-axis mirror, always in that order."""
    limit = math.radians(config.rotation_degrees)
    angle = float(rng.uniform(-limit, limit))
    scale = float(rng.uniform(1.0 - config.scale_range, 1.0 + config.scale_range))
    shift = rng.uniform(-1.0, 1.0, size=grid.ndim) * config.shift_fraction * np.asarray(grid.dims)
    flips = rng.random(grid.ndim) < config.mirror_probability
    mirror = tuple(bool(flips[a]) and a in config.mirror_axes for a in range(grid.ndim))
    return AugmentationDraw(angle=angle, scale=scale, shift=tuple(float(s) for s in shift), mirror=mirror)


def augmentation_transform(grid: Grid, draw: AugmentationDraw) -> Transform:
    """Source coordinate c + A (x - c) + t about the grid centre c."""
    ndim = grid.ndim
    rotation = np.eye(ndim)
    cos, sin = math.cos(draw.angle), math.sin(draw.angle)
    rotation[0, 0], rotation[0, 1], rotation[1, 0], rotation[1, 1] = cos, -sin, sin, cos
    flips = np.diag([-1.0 if m else 1.0 for m in draw.mirror])
    A = draw.scale * rotation @ flips

    centre = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    x = grid.identity_coordinates()
    shape = (ndim,) + (1,) * ndim
    offset = x - centre.reshape(shape)
    source = centre.reshape(shape) + np.einsum("ij,j...->i...", A, offset) + np.asarray(draw.shift).reshape(shape)
    return Transform(VectorField.from_channels_first(grid, source - x))


def augment(pair: ImagePair, rng: np.random.Generator, config: AugmentationConfig) -> ImagePair:
    """Apply one random transform to both images (multilinear) and all masks (nearest)."""
    if not config.enabled:
        return pair
    grid = pair.moving.grid
    phi = augmentation_transform(grid, draw_augmentation(rng, config, grid))
    return ImagePair(
        moving=warp_image(pair.moving, phi),
        fixed=warp_image(pair.fixed, phi),
        moving_masks={k: warp_mask(m, phi) for k, m in pair.moving_masks.items()},
        fixed_masks={k: warp_mask(m, phi) for k, m in pair.fixed_masks.items()},
    )


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    total: float
    reconstruction: float
    kl: float
    wall_ms: int

    def log_line(self) -> str:
        return f"{self.step}, {self.total:.9g}, {self.reconstruction:.9g}, {self.kl:.9g}, {self.wall_ms}"


@dataclass
class TrainingHistory:
    records: List[StepRecord] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


@dataclass
class LatentStatistics:
    """
    Per-dimension statistics of the codes of a dataset.

    mean_variance is the mean posterior variance exp(logvar). code_variance is
    the variance of the sampled codes z, Var(mu) + E[exp(logvar)], which is the
    quantity the KL term pulls towards one.
    """
    mean_mu: np.ndarray
    mean_variance: np.ndarray
    code_variance: np.ndarray


def latent_statistics(model: CvaeRegistrationModel, pairs: Sequence[ImagePair],
                      augmentation: Optional[AugmentationConfig] = None, draws: int = 1,
                      seed: int = 0) -> LatentStatistics:
    """
    Code statistics over `pairs`, or over `draws` augmented copies of each pair.

    Training only sees augmented pairs, so the KL term centres the codes of the
    augmented distribution; mirroring flips the sign of rotation and shear codes.
    """
    if not pairs:
        raise ValueError("latent statistics need at least one pair")
    if augmentation is not None and augmentation.enabled:
        rng = np.random.default_rng(seed)
        pairs = [augment(pair, rng, augmentation) for _ in range(max(draws, 1)) for pair in pairs]
    mus, logvars = model.encode_batch(pairs)
    variances = np.exp(logvars).mean(axis=0)
    return LatentStatistics(mean_mu=mus.mean(axis=0), mean_variance=variances,
                            code_variance=mus.var(axis=0) + variances)


def objective_gap(model: CvaeRegistrationModel, pairs: Sequence[ImagePair]) -> float:
    """
    Mean of reconstruction + KL at z = mu, measured above its lower bound -lambda.

    lcc <= 1 and KL >= 0, so the gap is non-negative and zero only for a perfect
    match with a standard normal posterior.
    """
    if not pairs:
        raise ValueError("objective gap needs at least one pair")
    noise = np.zeros(model.config.latent_dim)
    values = [model.loss(pair.fixed, pair.moving, noise).value for pair in pairs]
    return float(np.mean(values)) + model.config.lam


class Trainer:
    """Fits a CvaeRegistrationModel to a list of image pairs."""

    def __init__(self, model: CvaeRegistrationModel, config: Optional[TrainConfig] = None,
                 out_dir: Optional[Union[str, Path]] = None):
        self.model = model
        self.config = config or TrainConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.state = AdamState.zeros(model.parameter_arrays())
        self.step = 0

    def _checkpoint(self, history: TrainingHistory):
        if self.out_dir is None:
            return
        path = self.model.save(self.out_dir / f"ckpt_{self.step}.bin", {"step": self.step})
        history.checkpoints.append(path)
        logger.info(f"checkpoint written: {path}")

    def _abort(self, reason: str):
        snapshot = None
        if self.out_dir is not None:
            snapshot = write_archive(self.out_dir / f"abort_step_{self.step}.bin",
                                     self.model.parameter_arrays(), {"step": self.step, "reason": reason})
        logger.error(f"numerical abort at step {self.step}: {reason}")
        raise NumericalAbort(self.step, snapshot, reason)

    def train_step(self, batch: Sequence[ImagePair], rng: np.random.Generator) -> StepRecord:
        """Augment, forward, backward and update on one batch; gradients are batch means."""
        start = time.perf_counter()
        model = self.model
        model.zero_grad()
        total = reconstruction = kl = 0.0
        for pair in batch:
            sample = augment(pair, rng, self.config.augmentation)
            noise = rng.standard_normal(model.config.latent_dim)
            try:
                terms = model.loss(sample.fixed, sample.moving, noise)
            except AutodiffError as e:
                self._abort(str(e))
            if not math.isfinite(terms.value):
                self._abort(f"non-finite loss {terms.value}")
            backward(terms.total)
            total += terms.value
            reconstruction += terms.reconstruction
            kl += terms.kl

        n = len(batch)
        grads = {name: p.grad / n for name, p in model.params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self._abort("non-finite gradient")
        cfg = self.config
        params, self.state = adam_step(model.parameter_arrays(), grads, self.state, cfg.learning_rate,
                                       cfg.beta1, cfg.beta2, cfg.eps, model.config.weight_decay)
        model.set_parameters(params)
        self.step += 1

        wall_ms = int(round((time.perf_counter() - start) * 1000.0)) if cfg.record_wall_time else 0
        return StepRecord(self.step, total / n, reconstruction / n, kl / n, wall_ms)

    def train(self, pairs: Sequence[ImagePair]) -> TrainingHistory:
        """
        Run all epochs over `pairs` in a seeded per-epoch order.

        Writes loss_log.txt and ckpt_<step>.bin into out_dir when one is set;
        the final step is always checkpointed.
        """
        if not pairs:
            raise ValueError("training needs at least one image pair")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        history = TrainingHistory()
        log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log = open(self.out_dir / LOSS_LOG, "w", encoding="utf-8")
        logger.info(f"training on {len(pairs)} pairs for {cfg.epochs} epochs, batch {cfg.batch_size}")
        try:
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(pairs))
                epoch_losses = []
                for start in range(0, len(order), cfg.batch_size):
                    batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
                    record = self.train_step(batch, rng)
                    history.records.append(record)
                    epoch_losses.append(record.total)
                    logger.debug(record.log_line())
                    if log is not None:
                        log.write(record.log_line() + "\n")
                        log.flush()
                    if self.step % cfg.checkpoint_every == 0:
                        self._checkpoint(history)
                history.epoch_means.append(float(np.mean(epoch_losses)))
                logger.info(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {history.epoch_means[-1]:.4f}")
            if self.step % cfg.checkpoint_every != 0:
                self._checkpoint(history)
        finally:
            if log is not None:
                log.close()
        return history


def read_loss_log(path: Union[str, Path]) -> List[StepRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        step, total, reconstruction, kl, wall_ms = (part.strip() for part in line.split(","))
        records.append(StepRecord(int(step), float(total), float(reconstruction), float(kl), int(wall_ms)))
    return records
