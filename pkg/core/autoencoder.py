"""Six-layer convolutional autoencoder trained to overfit a small image set.

Layer order: upfeature (stride 1), two strided encoder convs, two transposed
decoder convs, downfeature (stride 1). Every layer but the last is followed by
a leaky rectifier. The translator reads the six layer outputs as the hidden
features it interpolates.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.persistence import write_csv

from . import functional as F
from .base_network import BaseNetwork
from .exceptions import ConvergenceError, EmptyDatasetError, ShapeError
from .optim import SGD
from .samples import ImageSample
from .structured_logger import StructuredLogger
from .tensor import Tensor, no_grad


class AEConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder_channels: List[int] = [64, 128, 256]
    decoder_channels: List[int] = [128, 64]
    kernel_size: int = Field(default=3, ge=1)
    decoder_kernel_size: int = Field(default=4, ge=1)
    stride_per_level: int = Field(default=2, ge=1)
    input_channels: int = Field(default=1, ge=1)
    leaky_slope: float = Field(default=0.01, ge=0.0)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    max_steps: int = Field(default=2000, ge=0)
    loss_threshold: float = Field(default=0.01, gt=0.0)
    log_every: int = Field(default=50, ge=1)
    require_convergence: bool = True
    balanced: bool = True
    init: Literal["pass_through", "glorot"] = "pass_through"
    init_noise: float = Field(default=0.05, ge=0.0)

    @model_validator(mode="after")
    def _check_layout(self) -> "AEConfig":
        if len(self.encoder_channels) != 3 or len(self.decoder_channels) != 2:
            raise ValueError("the autoencoder has exactly 3 encoder and 2 decoder channel entries")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if (self.decoder_kernel_size - self.stride_per_level) % 2 or self.decoder_kernel_size < self.stride_per_level:
            raise ValueError("decoder_kernel_size - stride_per_level must be a non-negative even number")
        return self

    @property
    def total_stride(self) -> int:
        return self.stride_per_level ** 2


@dataclass
class FeatureStack:
    """Outputs of the six layers, ordered encoder to decoder."""

    features: List[Tensor]
    source_shape: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, k: int) -> Tensor:
        return self.features[k]

    def channels(self) -> List[int]:
        return [f.shape[1] for f in self.features]


@dataclass
class OverfitStatus:
    converged: bool
    steps: int
    final_loss: float
    curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def label(self) -> str:
        return "converged" if self.converged else "non_converged"


class AEModel(BaseNetwork):
    """Encoder/decoder pair realized as six parameterized layers."""

    LAYER_NAMES = ("upfeature", "encoder1", "encoder2", "decoder1", "decoder2", "downfeature")

    def __init__(self, config: Optional[AEConfig] = None, rng: Optional[np.random.Generator] = None):
        config = config or AEConfig()
        super().__init__("ae", config)
        rng = rng if rng is not None else np.random.default_rng(0)
        c0, c1, c2 = config.encoder_channels
        d0, d1 = config.decoder_channels
        k, kt = config.kernel_size, config.decoder_kernel_size
        self.status: Optional[OverfitStatus] = None
        self.layers = [
            self.add_conv("upfeature", rng, (c0, config.input_channels, k, k)),
            self.add_conv("encoder1", rng, (c1, c0, k, k)),
            self.add_conv("encoder2", rng, (c2, c1, k, k)),
            self.add_conv("decoder1", rng, (c2, d0, kt, kt), transposed=True),
            self.add_conv("decoder2", rng, (d0, d1, kt, kt), transposed=True),
            self.add_conv("downfeature", rng, (config.input_channels, d1, k, k)),
        ]
        if config.init == "pass_through":
            self._pass_through_init()
        logger.debug(
            "Built autoencoder",
            extra={"parameters": self.parameter_count(), "channels": config.encoder_channels + config.decoder_channels},
        )

    def _pass_through_init(self) -> None:
        """Start from a network that reconstructs non-negative images exactly.

        Up/downfeature copy the image channels through their centre tap, the
        strided encoders start as space-to-depth and the transposed decoders as
        depth-to-space. The Glorot draws are kept, scaled by ``init_noise``.
        Channels beyond the layout's capacity carry noise only.
        """
        cfg = self.config
        s = cfg.stride_per_level
        pad = (cfg.kernel_size - 1) // 2
        tpad = (cfg.decoder_kernel_size - s) // 2
        weights = [layer["weight"].data for layer in self.layers]
        for w in weights:
            w *= cfg.init_noise

        images = min(cfg.input_channels, weights[0].shape[0])
        level1 = min(images * s * s, weights[1].shape[0])
        _identity_taps(weights[0], images, pad)
        _space_to_depth_taps(weights[1], images, s, pad)
        _space_to_depth_taps(weights[2], level1, s, pad)
        _depth_to_space_taps(weights[3], min(level1, weights[3].shape[1]), s, tpad)
        _depth_to_space_taps(weights[4], min(images, weights[4].shape[1]), s, tpad)
        _identity_taps(weights[5], min(images, weights[5].shape[1]), pad)

    def apply_layer(self, k: int, x: Tensor) -> Tensor:
        """Layer ``k`` (0-based) including its activation."""
        cfg = self.config
        layer = self.layers[k]
        pad = (cfg.kernel_size - 1) // 2
        if k == 0 or k == 5:
            out = F.conv2d(x, layer["weight"], layer["bias"], stride=1, pad=pad)
        elif k in (1, 2):
            out = F.conv2d(x, layer["weight"], layer["bias"], stride=cfg.stride_per_level, pad=pad)
        else:
            tpad = (cfg.decoder_kernel_size - cfg.stride_per_level) // 2
            out = F.conv2d_transposed(x, layer["weight"], layer["bias"], stride=cfg.stride_per_level, pad=tpad)
        if k < len(self.layers) - 1:
            out = F.leaky_relu(out, cfg.leaky_slope)
        return out

    def check_input(self, image: Tensor) -> None:
        multiple = self.config.total_stride
        if image.ndim != 4:
            raise ShapeError(f"autoencoder expects NCHW input, got shape {image.shape}")
        height, width = image.shape[2:]
        if height % multiple or width % multiple:
            raise ShapeError(
                f"image dims {height}x{width} must be divisible by {multiple}",
                error_code="INDIVISIBLE",
                details={"required_multiple": multiple},
            )

    def forward(self, image: Tensor) -> Tuple[Tensor, FeatureStack]:
        self.check_input(image)
        features = []
        h = image
        for k in range(len(self.layers)):
            h = self.apply_layer(k, h)
            features.append(h)
        return h, FeatureStack(features, tuple(image.shape))


# Tap helpers add 1 to the noise-scaled kernels; conv kernels are (O, I, kh, kw),
# transposed ones (I, O, kh, kw).


def _identity_taps(weight: np.ndarray, channels: int, pad: int) -> None:
    for c in range(channels):
        weight[c, c, pad, pad] += 1.0


def _space_to_depth_taps(weight: np.ndarray, channels: int, stride: int, pad: int) -> None:
    out_channels, _, kh, kw = weight.shape
    for c in range(channels):
        for a in range(stride):
            for b in range(stride):
                out = c * stride * stride + a * stride + b
                if out < out_channels and pad + a < kh and pad + b < kw:
                    weight[out, c, pad + a, pad + b] += 1.0


def _depth_to_space_taps(weight: np.ndarray, channels: int, stride: int, pad: int) -> None:
    in_channels, _, kh, kw = weight.shape
    for c in range(channels):
        for a in range(stride):
            for b in range(stride):
                src = c * stride * stride + a * stride + b
                if src < in_channels and pad + a < kh and pad + b < kw:
                    weight[src, c, pad + a, pad + b] += 1.0


def _as_batch(image: Union[Tensor, ImageSample, np.ndarray]) -> Tensor:
    if isinstance(image, ImageSample):
        return image.tensor()
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 2:
        return image.reshape(1, 1, *image.shape)
    if image.ndim == 3:
        return image.reshape(1, *image.shape)
    return image


def ae_forward(model: AEModel, image: Union[Tensor, ImageSample, np.ndarray]) -> Tuple[Tensor, FeatureStack]:
    """Reconstruction and hidden features; accepts (H, W), (1, H, W) or NCHW input."""
    return model.forward(_as_batch(image))


def l1_loss(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray]) -> float:
    """Mean absolute difference as a plain float."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    with no_grad():
        return F.l1_loss(a, b).item()


def _stack_images(images: Sequence[ImageSample]) -> Tensor:
    if not images:
        raise EmptyDatasetError("autoencoder training needs at least one image", error_code="EMPTY_SET")
    shapes = {s.pixels.shape for s in images}
    if len(shapes) != 1:
        raise ShapeError(f"training images must share one size, got {sorted(shapes)}")
    return Tensor(np.stack([s.pixels for s in images]))


def train_overfit(
    images: Sequence[ImageSample],
    config: Optional[AEConfig] = None,
    rng: Optional[np.random.Generator] = None,
    curve_path: Optional[Union[str, Path]] = None,
    run_id: Optional[str] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> AEModel:
    """Full-batch SGD on the L1 reconstruction loss until it drops below the threshold.

    The outcome is kept on ``model.status``; with ``config.require_convergence``
    a non-converged run raises ``ConvergenceError`` instead.
    """
    config = config or AEConfig()
    batch = _stack_images(images)
    model = AEModel(config, rng)
    model.check_input(batch)
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    structured = StructuredLogger()
    run_id = run_id or structured.generate_run_id()

    curve: List[Tuple[int, float]] = []
    loss_value = float("inf")
    converged = False
    step = 0
    while True:
        optimizer.zero_grad()
        recon, _ = model.forward(batch)
        loss = F.l1_loss(recon, batch)
        loss_value = loss.item()
        curve.append((step, loss_value))
        if on_step is not None:
            on_step(step, loss_value)
        if step % config.log_every == 0:
            structured.log_training_step(run_id, "ae", step, loss_value)
        if loss_value < config.loss_threshold:
            converged = True
            break
        if step >= config.max_steps:
            break
        loss.backward()
        optimizer.step()
        step += 1

    model.status = OverfitStatus(converged=converged, steps=step, final_loss=loss_value, curve=curve)
    if curve_path is not None:
        write_csv(curve_path, ["step", "loss"], curve)
    logger.info(
        f"Autoencoder overfit {model.status.label} after {step} steps (L1={loss_value:.5f})",
        extra={"images": len(images), "threshold": config.loss_threshold},
    )
    if not converged and config.require_convergence:
        raise ConvergenceError(
            f"autoencoder L1 {loss_value:.5f} still above {config.loss_threshold} after {step} steps",
            error_code="AE_NOT_CONVERGED",
            details={"steps": step, "loss": loss_value},
        )
    return model
