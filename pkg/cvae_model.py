"""
Conditional variational registration network.

The encoder maps a (fixed, moving) pair to a diagonal Gaussian over a small
latent code z. The decoder turns z into a stationary velocity field,
conditioned on the moving image at every upsampling scale, smooths it and
hands it to the exponentiation layer.
"""
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Activation, Tensor
from config import ModelConfig
from grid_field import (
    FieldKind, ScalarImage, Transform, VectorField, exponentiate, negative_jacobian_fraction,
    warp_image, warp_mask,
)
from similarity import field_stats, metrics_report
from tensor_io import write_archive, read_archive

logger = logging.getLogger(__name__)

ENCODER_STRIDES = (2, 2, 2, 1)
# Downsampling factor of the moving image concatenated after each deconvolution.
CONDITIONING_FACTORS = (4, 2, 1)
SLOW_REGISTRATION_MS = 1000.0


class ModelError(ValueError):
    """Input or checkpoint does not fit the configured network."""


class RegistrationMode(Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass
class ImagePair:
    """A moving image, the fixed image it should be aligned to, optional label masks."""
    moving: ScalarImage
    fixed: ScalarImage
    moving_masks: Dict[str, np.ndarray] = field(default_factory=dict)
    fixed_masks: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LatentCode:
    z: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class RegistrationResult:
    """Output of one forward pass."""
    velocity: VectorField
    phi: Transform
    warped: ScalarImage
    latent: Optional[LatentCode]
    metrics: Dict[str, float] = field(default_factory=dict)
    warped_masks: Dict[str, np.ndarray] = field(default_factory=dict)
    wall_ms: float = 0.0


@dataclass
class LossTerms:
    """Loss of one pair; only `total` carries the graph."""
    total: Tensor
    reconstruction: float
    kl: float
    weight_decay: float

    @property
    def value(self) -> float:
        return self.total.item()


class CvaeRegistrationModel:
    """Encoder, conditioned decoder, smoothing and exponentiation with their parameters."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.grid = self.config.grid
        self.params: Dict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        for name, (shape, fan_in, fan_out) in self.parameter_shapes().items():
            if name.endswith(".b"):
                values = np.zeros(shape)
            else:
                values = ad.glorot_uniform(shape, fan_in, fan_out, rng)
            self.params[name] = Tensor(values, requires_grad=True, name=name)
        logger.info(f"model with {self.parameter_count()} parameters on grid {self.grid.dims}")

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def parameter_shapes(self) -> "OrderedDict[str, Tuple[Tuple[int, ...], int, int]]":
        """Name -> (shape, fan_in, fan_out) for every trainable tensor."""
        cfg = self.config
        ndim = len(cfg.grid_dims)
        k = (cfg.conv_kernel,) * ndim
        taps = cfg.conv_kernel ** ndim
        coarse = int(np.prod([n // 8 for n in cfg.grid_dims]))
        shapes = OrderedDict()

        def add(name, shape, fan_in, fan_out):
            shapes[name + ".w"] = (tuple(shape), fan_in, fan_out)
            shapes[name + ".b"] = ((shape[0] if not name.startswith("deconv") else shape[1],), fan_in, fan_out)

        channels = 2
        for i, width in enumerate(cfg.encoder_widths):
            add(f"enc{i}", (width, channels) + k, channels * taps, width * taps)
            channels = width
        flat = channels * coarse
        add("mu", (cfg.latent_dim, flat), flat, cfg.latent_dim)
        add("logvar", (cfg.latent_dim, flat), flat, cfg.latent_dim)

        bottleneck, *deconv_widths = cfg.decoder_widths[:4]
        conv_widths = cfg.decoder_widths[4:]
        add("dec_dense", (bottleneck * coarse, cfg.latent_dim), cfg.latent_dim, bottleneck * coarse)
        channels = bottleneck
        for i, width in enumerate(deconv_widths):
            add(f"deconv{i}", (channels, width) + k, channels * taps, width * taps)
            channels = width + 1
        for i, width in enumerate(conv_widths):
            add(f"conv{i}", (width, channels) + k, channels * taps, width * taps)
            channels = width
        add("velocity", (ndim, channels) + k, channels * taps, ndim * taps)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def set_parameters(self, arrays: Dict[str, np.ndarray]):
        for name, p in self.params.items():
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ModelError(f"parameter {name} has shape {values.shape}, expected {p.shape}")
            p.data = values

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _frozen(self) -> Dict[str, Tensor]:
        return {name: Tensor(p.data) for name, p in self.params.items()}

    # ------------------------------------------------------------------
    # Graph builders
    # ------------------------------------------------------------------

    def _check_image(self, img: ScalarImage, role: str):
        if img.grid.dims != self.grid.dims:
            raise ModelError(f"{role} image grid {img.grid.dims} does not match model grid {self.grid.dims}")

    @staticmethod
    def _channel(img: ScalarImage) -> Tensor:
        return Tensor(img.values[np.newaxis])

    def _encoder(self, p: Dict[str, Tensor], F: Tensor, M: Tensor) -> Tuple[Tensor, Tensor]:
        h = ad.concat(F, M)
        for i, stride in enumerate(ENCODER_STRIDES):
            h = ad.activation(ad.conv(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride),
                              slope=self.config.leaky_slope)
        flat = h.reshape(h.size)
        return ad.dense(flat, p["mu.w"], p["mu.b"]), ad.dense(flat, p["logvar.w"], p["logvar.b"])

    def _decoder(self, p: Dict[str, Tensor], z: Tensor, M: Tensor) -> Tensor:
        cfg = self.config
        coarse = tuple(n // 8 for n in cfg.grid_dims)
        h = ad.activation(ad.dense(z, p["dec_dense.w"], p["dec_dense.b"]), slope=cfg.leaky_slope)
        h = h.reshape((cfg.decoder_widths[0],) + coarse)
        for i, factor in enumerate(CONDITIONING_FACTORS):
            h = ad.activation(ad.deconv(h, p[f"deconv{i}.w"], p[f"deconv{i}.b"], stride=2),
                              slope=cfg.leaky_slope)
            h = ad.concat(h, ad.downsample(M, factor))
        for i in range(len(cfg.decoder_widths) - 4):
            h = ad.activation(ad.conv(h, p[f"conv{i}.w"], p[f"conv{i}.b"]), slope=cfg.leaky_slope)
        v = ad.activation(ad.conv(h, p["velocity.w"], p["velocity.b"]), Activation.IDENTITY)
        return ad.smooth(v, cfg.sigma_s, cfg.smoothing_kernel)

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    def encode(self, F: ScalarImage, M: ScalarImage) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and log-variance of the latent code for the ordered pair (F, M)."""
        self._check_image(F, "fixed")
        self._check_image(M, "moving")
        mu, logvar = self._encoder(self._frozen(), self._channel(F), self._channel(M))
        return mu.data, logvar.data

    def encode_batch(self, pairs: Sequence[ImagePair]) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked (n, d) posterior means and log-variances."""
        codes = [self.encode(pair.fixed, pair.moving) for pair in pairs]
        if not codes:
            d = self.config.latent_dim
            return np.zeros((0, d)), np.zeros((0, d))
        return np.stack([c[0] for c in codes]), np.stack([c[1] for c in codes])

    def decode(self, z: np.ndarray, M: ScalarImage) -> VectorField:
        """Smoothed velocity field for code z conditioned on the moving image."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.config.latent_dim,):
            raise ModelError(f"latent code has shape {z.shape}, expected ({self.config.latent_dim},)")
        if not np.all(np.isfinite(z)):
            raise ModelError("latent code contains non-finite values")
        self._check_image(M, "moving")
        v = self._decoder(self._frozen(), Tensor(z), self._channel(M))
        return VectorField.from_channels_first(M.grid, v.data, kind=FieldKind.VELOCITY)

    def realize(self, z: np.ndarray, M: ScalarImage, F: Optional[ScalarImage] = None,
                latent: Optional[LatentCode] = None,
                moving_masks: Optional[Dict[str, np.ndarray]] = None,
                fixed_masks: Optional[Dict[str, np.ndarray]] = None) -> RegistrationResult:
        """Decode z on M, exponentiate, warp; metrics against F when it is given."""
        start = time.perf_counter()
        velocity = self.decode(z, M)
        phi = exponentiate(velocity, self.config.scaling_steps)
        warped = warp_image(M, phi)
        warped_masks = {label: warp_mask(mask, phi) for label, mask in (moving_masks or {}).items()}
        wall_ms = (time.perf_counter() - start) * 1000.0
        if F is not None:
            metrics = metrics_report(F, M, velocity, phi, warped, self.config.lcc,
                                     self.config.scaling_steps, warped_masks, fixed_masks)
        else:
            metrics = field_stats(phi.displacement)
            metrics["neg_jac_fraction"] = negative_jacobian_fraction(phi)
        return RegistrationResult(velocity=velocity, phi=phi, warped=warped, latent=latent,
                                  metrics=metrics, warped_masks=warped_masks, wall_ms=wall_ms)

    def register(self, M: ScalarImage, F: ScalarImage,
                 mode: RegistrationMode = RegistrationMode.DETERMINISTIC,
                 rng: Optional[np.random.Generator] = None,
                 moving_masks: Optional[Dict[str, np.ndarray]] = None,
                 fixed_masks: Optional[Dict[str, np.ndarray]] = None) -> RegistrationResult:
        """
        Register M onto F in a single forward pass.

        Args:
            M: moving image, intensities in [0, 1]
            F: fixed image on the same grid
            mode: DETERMINISTIC uses z = mu, STOCHASTIC draws z from the posterior
            rng: required for STOCHASTIC
            moving_masks, fixed_masks: optional label masks for Dice and hd95

        Returns:
            RegistrationResult with M* = M o exp(v)
        """
        start = time.perf_counter()
        mu, logvar = self.encode(F, M)
        if mode == RegistrationMode.STOCHASTIC:
            if rng is None:
                raise ModelError("stochastic registration needs a seeded generator")
            z = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
        else:
            z = mu
        result = self.realize(z, M, F, LatentCode(z=z, mu=mu, logvar=logvar), moving_masks, fixed_masks)
        result.wall_ms = (time.perf_counter() - start) * 1000.0
        if result.wall_ms > SLOW_REGISTRATION_MS:
            logger.warning(f"registration took {result.wall_ms:.0f} ms")
        logger.debug(f"registered pair in {result.wall_ms:.1f} ms, lcc={result.metrics['lcc']:.4f}")
        return result

    # ------------------------------------------------------------------
    # Training objective
    # ------------------------------------------------------------------

    def loss(self, F: ScalarImage, M: ScalarImage, noise: np.ndarray) -> LossTerms:
        """
        -lambda * lcc of the half-way warped pair plus KL to the unit Gaussian prior.

        The weight-decay penalty 0.5 * wd * |theta|^2 is reported but left out of
        `total`; the optimizer adds its gradient.
        """
        self._check_image(F, "fixed")
        self._check_image(M, "moving")
        cfg = self.config
        p = self.params
        F_t, M_t = self._channel(F), self._channel(M)

        mu, logvar = self._encoder(p, F_t, M_t)
        z = ad.reparameterize(mu, logvar, noise)
        v = self._decoder(p, z, M_t)

        F_half = ad.warp_node(F_t, ad.exponentiate_node(v * -0.5, cfg.scaling_steps))
        M_half = ad.warp_node(M_t, ad.exponentiate_node(v * 0.5, cfg.scaling_steps))
        lcc_cfg = cfg.lcc

        def local_mean(x: Tensor) -> Tensor:
            return ad.smooth(x, lcc_cfg.sigma_g, lcc_cfg.kernel_size)

        numerator = ad.square(local_mean(F_half * M_half))
        denominator = local_mean(ad.square(F_half)) * local_mean(ad.square(M_half)) + lcc_cfg.epsilon
        reconstruction = (numerator / denominator).mean() * -cfg.lam
        kl = (ad.square(mu) + ad.exp(logvar) - logvar - 1.0).sum() * 0.5

        penalty = 0.5 * cfg.weight_decay * sum(float(np.sum(t.data ** 2)) for t in p.values())
        return LossTerms(total=reconstruction + kl, reconstruction=reconstruction.item(),
                         kl=kl.item(), weight_decay=penalty)

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save(self, path: Union[str, Path], record: Optional[Dict] = None) -> Path:
        meta = dict(record or {})
        meta["config"] = self.config.model_dump(mode="json", by_alias=True)
        meta["parameter_count"] = self.parameter_count()
        return write_archive(path, self.parameter_arrays(), meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CvaeRegistrationModel":
        path = Path(path)
        if not path.is_file():
            raise ModelError(f"checkpoint not found: {path}")
        tensors, record = read_archive(path)
        if "config" not in record:
            raise ModelError(f"checkpoint {path} carries no model config")
        model = cls(ModelConfig.model_validate(record["config"]))
        missing = sorted(set(model.params) - set(tensors))
        if missing:
            raise ModelError(f"checkpoint {path} lacks parameters {missing}")
        model.set_parameters(tensors)
        logger.info(f"loaded checkpoint {path}")
        return model


def random_parameter_draws(config: ModelConfig, count: int, seed: int = 0) -> List[CvaeRegistrationModel]:
    """Independently initialized models, for architecture-level property checks."""
    return [CvaeRegistrationModel(config, seed=seed + i) for i in range(count)]
