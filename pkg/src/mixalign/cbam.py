"""Channel-then-spatial attention refinement of a feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, conv2d

__all__ = ["CbamParams", "init_cbam", "channel_attention", "spatial_attention", "cbam_forward"]


@dataclass
class CbamParams:
    """Weights of one attention block.

    The channel MLP (``w1: [C/r, C]``, ``w2: [C, C/r]`` plus biases) is shared
    between the average- and max-pooled descriptors. ``spatial_kernel`` has
    shape ``[1, 2, k, k]`` and sees the channel-mean and channel-max maps.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    spatial_kernel: Tensor
    spatial_bias: Tensor

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.spatial_kernel.shape[-1]

    def named(self, prefix: str = "cbam") -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
            f"{prefix}.spatial_kernel": self.spatial_kernel,
            f"{prefix}.spatial_bias": self.spatial_bias,
        }


def init_cbam(channels: int, rng: np.random.Generator, reduction: int = 8, kernel_size: int = 7) -> CbamParams:
    if channels % reduction:
        raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
    if kernel_size % 2 == 0:
        raise ValueError(f"spatial kernel size must be odd, got {kernel_size}")
    hidden = channels // reduction

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return CbamParams(
        w1=uniform((hidden, channels), channels),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=uniform((channels, hidden), hidden),
        b2=Tensor(np.zeros(channels), requires_grad=True),
        spatial_kernel=uniform((1, 2, kernel_size, kernel_size), 2 * kernel_size * kernel_size),
        spatial_bias=Tensor(np.zeros(1), requires_grad=True),
    )


def _mlp(v: Tensor, p: CbamParams) -> Tensor:
    hidden = (v @ p.w1.T + p.b1).relu()
    return hidden @ p.w2.T + p.b2


def channel_attention(F: Tensor, params: CbamParams) -> Tensor:
    """Gate in (0, 1) per (instance, channel), shaped [B, C, 1, 1]."""
    B, C = F.shape[:2]
    if C != params.channels:
        raise ShapeError(f"feature map has {C} channels, attention expects {params.channels}")
    avg = F.mean(axis=(2, 3))
    peak = F.max(axis=(2, 3))
    gate = (_mlp(avg, params) + _mlp(peak, params)).sigmoid()
    return gate.reshape(B, C, 1, 1)


def spatial_attention(F: Tensor, params: CbamParams) -> Tensor:
    """Gate in (0, 1) per (instance, location), shaped [B, 1, H, W]."""
    pooled = concat([F.mean(axis=1, keepdims=True), F.max(axis=1, keepdims=True)], axis=1)
    pad = (params.kernel_size - 1) // 2
    return conv2d(pooled, params.spatial_kernel, params.spatial_bias, stride=1, padding=pad).sigmoid()


def cbam_forward(F: Tensor, params: CbamParams) -> Tensor:
    if F.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W], got {F.shape}")
    refined = channel_attention(F, params) * F
    return spatial_attention(refined, params) * refined
