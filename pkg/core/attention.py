"""Pyramid backbone and conjunct attention over folded feature patches.

Every pyramid level ``l`` (0-based) has ``2**l · c`` channels. Folding stacks
its channel groups along the row axis, so all levels become ``c`` channels with
the row count of level 0 and one token width ``D = c·ph·pw``. That lets a single
multi-head self-attention block and a single positional table serve all levels.
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import einops
import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from . import functional as F
from .base_network import BaseNetwork
from .exceptions import ShapeError
from .rng import glorot_uniform
from .tensor import Parameter, Tensor

LEVELS = 4


class AttnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_channels: int = Field(default=8, ge=1)
    patch_h: int = Field(default=5, ge=1)
    patch_w: int = Field(default=4, ge=1)
    heads: int = Field(default=8, ge=1)
    depth: int = Field(default=1, ge=1)
    literal_form: bool = True
    max_fold: int = Field(default=8, ge=1)
    leaky_slope: float = Field(default=0.01, ge=0.0)
    layer_norm_eps: float = Field(default=1e-5, gt=0.0)
    pos_init_std: float = Field(default=0.02, ge=0.0)

    @property
    def patch(self) -> Tuple[int, int]:
        return self.patch_h, self.patch_w

    def token_dim(self) -> int:
        return self.base_channels * self.patch_h * self.patch_w


@dataclass
class FeaturePyramid:
    levels: List[Tensor]

    def __post_init__(self):
        if len(self.levels) != LEVELS:
            raise ShapeError(f"a feature pyramid has {LEVELS} levels, got {len(self.levels)}")

    def shapes(self) -> List[Tuple[int, ...]]:
        return [lvl.shape for lvl in self.levels]


@dataclass
class TokenSequence:
    tokens: Tensor
    level: int
    fold_factor: int
    grid: Tuple[int, int]
    channels: int
    patch: Tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.shape[0] != rows * cols * self.fold_factor:
            raise ShapeError(
                f"level {self.level}: {self.tokens.shape[0]} tokens for grid {self.grid} and fold {self.fold_factor}"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


# -- backbone ----------------------------------------------------------------


class Backbone(BaseNetwork):
    """Four stride-2 3x3 convolutions with channel doubling."""

    def __init__(self, config: Optional[AttnConfig] = None, rng: Optional[np.random.Generator] = None, in_channels: int = 1):
        config = config or AttnConfig()
        super().__init__("backbone", config)
        rng = rng if rng is not None else np.random.default_rng(0)
        channels = [in_channels] + [config.base_channels * 2 ** level for level in range(LEVELS)]
        self.convs = [
            self.add_conv(f"level{level}", rng, (channels[level + 1], channels[level], 3, 3)) for level in range(LEVELS)
        ]

    def forward(self, image: Tensor) -> FeaturePyramid:
        height, width = image.shape[2:]
        if height % 2 ** LEVELS or width % 2 ** LEVELS:
            raise ShapeError(
                f"backbone input {height}x{width} must be divisible by {2 ** LEVELS}",
                details={"required_multiple": 2 ** LEVELS},
            )
        levels = []
        h = image
        for conv in self.convs:
            h = F.leaky_relu(F.conv2d(h, conv["weight"], conv["bias"], stride=2, pad=1), self.config.leaky_slope)
            levels.append(h)
        return FeaturePyramid(levels)


def backbone_forward(backbone: Backbone, image: Tensor) -> FeaturePyramid:
    return backbone.forward(image)


def pyramid_shapes(image_dims: Tuple[int, int], base_channels: int, patch: Tuple[int, int] = (5, 4)) -> List[Dict]:
    """Per-level map shape, fold factor and patch grid for an input of ``image_dims``.

    Raises ``ShapeError`` naming the first level whose dims do not tile into patches.
    """
    height, width = image_dims
    ph, pw = patch
    if height % 2 ** LEVELS or width % 2 ** LEVELS:
        raise ShapeError(f"input {height}x{width} must be divisible by {2 ** LEVELS}")
    shapes = []
    for level in range(LEVELS):
        h, w = height >> (level + 1), width >> (level + 1)
        if h % ph or w % pw:
            raise ShapeError(
                f"level {level} map {h}x{w} does not tile into {ph}x{pw} patches",
                error_code="PATCH_INDIVISIBLE",
                details={"level": level, "dims": [h, w], "patch": [ph, pw]},
            )
        fold = 2 ** level
        shapes.append(
            {
                "level": level,
                "shape": (base_channels * fold, h, w),
                "fold": fold,
                "grid": (h // ph, w // pw),
                "tokens": fold * (h // ph) * (w // pw),
            }
        )
    return shapes


# -- folding and patches -------------------------------------------------------


def fold_channels(level_map: Tensor, base_c: int) -> Tensor:
    """(k·c, h, w) -> (c, k·h, w): channel group ``g`` lands in rows ``g·h .. g·h+h-1``."""
    channels = level_map.shape[0]
    if channels % base_c:
        raise ShapeError(f"cannot fold {channels} channels into groups of {base_c}")
    if channels == base_c:
        return level_map
    return level_map.rearrange("(k c) h w -> c (k h) w", c=base_c, h=level_map.shape[1])


def unfold_channels(folded: Tensor, fold_factor: int) -> Tensor:
    if fold_factor == 1:
        return folded
    if folded.shape[1] % fold_factor:
        raise ShapeError(f"cannot unfold {folded.shape[1]} rows by {fold_factor}")
    return folded.rearrange("c (k h) w -> (k c) h w", k=fold_factor)


def patchify(folded: Tensor, patch: Tuple[int, int], level: int = 0, fold_factor: int = 1) -> TokenSequence:
    """Row-major (c, ph, pw) blocks as tokens of width c·ph·pw."""
    c, height, width = folded.shape
    ph, pw = patch
    if height % (ph * fold_factor) or width % pw:
        raise ShapeError(
            f"level {level}: folded map {height}x{width} does not tile into {ph}x{pw} patches",
            error_code="PATCH_INDIVISIBLE",
            details={"level": level, "dims": [height, width], "patch": [ph, pw]},
        )
    tokens = folded.rearrange("c (r ph) (q pw) -> (r q) (c ph pw)", ph=ph, pw=pw, c=c, q=width // pw)
    grid = (height // fold_factor // ph, width // pw)
    return TokenSequence(tokens, level=level, fold_factor=fold_factor, grid=grid, channels=c, patch=patch)


def unpatchify(seq: TokenSequence, target_dims: Optional[Tuple[int, int, int]] = None) -> Tensor:
    """Inverse of ``fold_channels`` followed by ``patchify``; returns the unfolded level map."""
    ph, pw = seq.patch
    rows, cols = seq.grid
    folded = seq.tokens.rearrange(
        "(r q) (c ph pw) -> c (r ph) (q pw)", r=rows * seq.fold_factor, q=cols, c=seq.channels, ph=ph, pw=pw
    )
    level_map = unfold_channels(folded, seq.fold_factor)
    if target_dims is not None and tuple(level_map.shape) != tuple(target_dims):
        raise ShapeError(f"level {seq.level}: tokens rebuild {level_map.shape}, expected {tuple(target_dims)}")
    return level_map


def add_positional(seq: TokenSequence, table: Tensor) -> TokenSequence:
    """Add the first ``T`` rows of the shared table to the tokens."""
    length, dim = table.shape
    if seq.length > length:
        raise ShapeError(f"level {seq.level}: {seq.length} tokens exceed positional table of {length} rows")
    if seq.dim != dim:
        raise ShapeError(f"token width {seq.dim} does not match positional table width {dim}")
    return replace(seq, tokens=seq.tokens + table[: seq.length])


# -- attention -----------------------------------------------------------------


@dataclass
class MSAWeights:
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    gamma: Parameter
    beta: Parameter


def multi_head_attention(
    x: Tensor, weights: MSAWeights, heads: int, return_attention: bool = False
):
    """Scaled dot-product self-attention over the rows of ``x`` (T, D); no biases."""
    tokens, dim = x.shape
    if dim % heads:
        raise ShapeError(f"token width {dim} is not divisible by {heads} heads")
    head_dim = dim // heads
    q = F.linear(x, weights.w_q).rearrange("t (h d) -> h t d", h=heads)
    k = F.linear(x, weights.w_k).rearrange("t (h d) -> h t d", h=heads)
    v = F.linear(x, weights.w_v).rearrange("t (h d) -> h t d", h=heads)
    scores = q.matmul(k.transpose(0, 2, 1)) * (1.0 / np.sqrt(head_dim))
    attn = F.softmax(scores, axis=-1)
    mixed = attn.matmul(v).rearrange("h t d -> t (h d)", h=heads)
    out = F.linear(mixed, weights.w_o)
    return (out, attn) if return_attention else out


def msa_block(
    seq: TokenSequence,
    weights: MSAWeights,
    heads: int = 8,
    literal_form: bool = True,
    eps: float = 1e-5,
    return_attention: bool = False,
):
    """One attention block without feed-forward layers.

    literal form: ``MSA(LN(z) + z)``; residual form: ``z + MSA(LN(z))``.
    """
    z = seq.tokens
    normed = F.layer_norm(z, weights.gamma, weights.beta, eps)
    if literal_form:
        out, attn = multi_head_attention(normed + z, weights, heads, return_attention=True)
    else:
        delta, attn = multi_head_attention(normed, weights, heads, return_attention=True)
        out = z + delta
    result = replace(seq, tokens=out)
    return (result, attn) if return_attention else result


class ConjunctAttention(BaseNetwork):
    """Shared attention blocks and positional table applied to every pyramid level."""

    def __init__(
        self,
        config: Optional[AttnConfig] = None,
        image_dims: Tuple[int, int] = (80, 64),
        rng: Optional[np.random.Generator] = None,
    ):
        config = config or AttnConfig()
        super().__init__("attention", config)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.shapes = pyramid_shapes(image_dims, config.base_channels, config.patch)
        dim = config.token_dim()
        if dim % config.heads:
            raise ShapeError(f"token width {dim} is not divisible by {config.heads} heads")

        base_tokens = self.shapes[0]["tokens"]
        self.table_length = base_tokens * config.max_fold
        self.pos_table = self.add_parameter(
            "pos_table", rng.normal(0.0, config.pos_init_std, size=(self.table_length, dim))
        )
        self.blocks = []
        for index in range(config.depth):
            prefix = f"block{index}"
            self.blocks.append(
                MSAWeights(
                    *(
                        self.add_parameter(f"{prefix}.{name}", glorot_uniform(rng, (dim, dim), dim, dim))
                        for name in ("w_q", "w_k", "w_v", "w_o")
                    ),
                    gamma=self.add_parameter(f"{prefix}.ln_gamma", np.ones(dim)),
                    beta=self.add_parameter(f"{prefix}.ln_beta", np.zeros(dim)),
                )
            )
        logger.debug(
            "Built conjunct attention",
            extra={"token_dim": dim, "table_rows": self.table_length, "depth": config.depth},
        )

    def attend_level(self, level_map: Tensor, level: int) -> Tensor:
        cfg = self.config
        fold = 2 ** level
        seq = patchify(fold_channels(level_map, cfg.base_channels), cfg.patch, level=level, fold_factor=fold)
        seq = add_positional(seq, self.pos_table)
        for block in self.blocks:
            seq = msa_block(seq, block, cfg.heads, cfg.literal_form, cfg.layer_norm_eps)
        return unpatchify(seq, level_map.shape)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        enhanced = []
        for level, level_map in enumerate(pyramid.levels):
            if level_map.ndim == 3:
                enhanced.append(self.attend_level(level_map, level))
                continue
            per_image = [self.attend_level(level_map[n], level) for n in range(level_map.shape[0])]
            enhanced.append(F.stack(per_image, axis=0))
        return FeaturePyramid(enhanced)


def conjunct_attention(pyr: FeaturePyramid, module: ConjunctAttention) -> FeaturePyramid:
    return module.forward(pyr)


# -- reference patch accounting -------------------------------------------------


def count_reference_patches(
    grid_dims: Tuple[int, int],
    tumor_patches: int,
    blank_patches: int,
    blank_after: int = 0,
) -> Tuple[int, int]:
    """Informative non-tumor patches before and after translation.

    ``blank_patches`` carry no tissue in the original; translation leaves
    ``blank_after`` of them blank and turns the rest into reference patches.
    """
    total = grid_dims[0] * grid_dims[1]
    if min(tumor_patches, blank_patches, blank_after) < 0:
        raise ValueError("patch counts must be non-negative")
    if tumor_patches + blank_patches > total:
        raise ValueError(f"{tumor_patches} tumor + {blank_patches} blank patches exceed a grid of {total}")
    if blank_after > blank_patches:
        raise ValueError("translation cannot create blank patches")
    return total - tumor_patches - blank_patches, total - tumor_patches - blank_after


def _patch_any(mask: np.ndarray, patch: Tuple[int, int]) -> np.ndarray:
    ph, pw = patch
    height, width = mask.shape
    if height % ph or width % pw:
        raise ShapeError(f"mask {height}x{width} does not tile into {ph}x{pw} patches")
    return einops.reduce(mask.astype(np.int8), "(r ph) (q pw) -> r q", "max", ph=ph, pw=pw).astype(bool)


def reference_patches_from_masks(
    tumor_mask: np.ndarray,
    foreground_before: np.ndarray,
    foreground_after: np.ndarray,
    patch: Tuple[int, int],
) -> Tuple[int, int]:
    """Apply ``count_reference_patches`` to pixel masks.

    A patch is a tumor patch if it holds any tumor pixel and blank if it holds no
    foreground pixel.
    """
    tumor = _patch_any(np.asarray(tumor_mask, dtype=bool), patch)
    blank_before = ~_patch_any(np.asarray(foreground_before, dtype=bool), patch) & ~tumor
    blank_after = ~_patch_any(np.asarray(foreground_after, dtype=bool), patch) & ~tumor & blank_before
    return count_reference_patches(
        tumor.shape, int(tumor.sum()), int(blank_before.sum()), int(blank_after.sum())
    )
