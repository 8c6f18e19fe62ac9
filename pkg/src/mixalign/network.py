"""Three-stage convolutional classifier with style mixing and attention refinement.

Topology (for 32x32 inputs and the default widths 16, 32, 64)::

    stage1: conv3x3 -> relu -> avgpool2      [B, 16, 16, 16]
    mixstyle
    stage2: conv3x3 -> relu -> avgpool2      [B, 32, 8, 8]
    mixstyle
    stage3: conv3x3 -> relu -> avgpool2      [B, 64, 4, 4]
    cbam                                     F_hat
    global average pool -> linear head       [B, 2]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbam import CbamParams, cbam_forward, init_cbam
from .mixstyle import MixStyleConfig, mixstyle_forward
from .tensor import ShapeError, Tensor, avg_pool2d, conv2d

__all__ = ["Network"]


@dataclass
class Network:
    """Parameter container plus forward pass.

    ``params`` is an ordered name -> leaf tensor mapping; the CBAM block reads
    its weights from the same mapping, so optimizers, the EMA teacher and
    checkpoints all see a single flat parameter set.
    """

    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    image_size: int = 32
    cbam_reduction: int = 8
    cbam_kernel: int = 7
    mixstyle_stages: tuple[int, ...] = (1, 2)
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    use_cbam: bool = True
    params: dict[str, Tensor] = field(default_factory=dict)
    training: bool = True
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    @classmethod
    def create(cls, rng: np.random.Generator, **kwargs) -> Network:
        net = cls(**kwargs)
        net.init_params(rng)
        return net

    def init_params(self, rng: np.random.Generator) -> None:
        params: dict[str, Tensor] = {}
        c_in = self.in_channels
        for i, c_out in enumerate(self.widths, start=1):
            bound = np.sqrt(6.0 / (c_in * 9))
            params[f"conv{i}.weight"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)), requires_grad=True)
            params[f"conv{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out
        if self.use_cbam:
            params.update(init_cbam(c_in, rng, self.cbam_reduction, self.cbam_kernel).named("cbam"))
        bound = 1.0 / np.sqrt(c_in)
        params["head.weight"] = Tensor(rng.uniform(-bound, bound, (2, c_in)), requires_grad=True)
        params["head.bias"] = Tensor(np.zeros(2), requires_grad=True)
        self.params = params

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.widths)

    def fit_input_scaling(self, images: np.ndarray) -> None:
        """Standardize inputs with per-channel training statistics (fixed, not learned)."""
        self.input_mean = images.mean(axis=(0, 2, 3))
        self.input_std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)

    def cbam_params(self, params: dict[str, Tensor] | None = None) -> CbamParams:
        p = self.params if params is None else params
        return CbamParams(
            w1=p["cbam.w1"], b1=p["cbam.b1"], w2=p["cbam.w2"], b2=p["cbam.b2"],
            spatial_kernel=p["cbam.spatial_kernel"], spatial_bias=p["cbam.spatial_bias"],
        )

    def train(self, mode: bool = True) -> Network:
        self.training = mode
        return self

    def eval(self) -> Network:
        return self.train(False)

    def forward(self, images, rng: np.random.Generator | None = None, params: dict[str, Tensor] | None = None):
        """Return ``(logits [B, 2], F_hat [B, C, h, w])``.

        ``params`` overrides the stored weights (the EMA teacher runs the same
        graph on its own arrays). Style mixing only happens in training mode.
        """
        p = self.params if params is None else params
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"expected images of shape [B, {self.in_channels}, {self.image_size}, {self.image_size}], got {x.shape}"
            )
        if self.input_mean is not None:
            x = Tensor((x.data - self.input_mean.reshape(1, -1, 1, 1)) / self.input_std.reshape(1, -1, 1, 1))
        for i in range(1, len(self.widths) + 1):
            x = conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=1).relu()
            x = avg_pool2d(x, 2)
            if self.training and i in self.mixstyle_stages:
                x = mixstyle_forward(x, self.mixstyle, rng)
        F_hat = cbam_forward(x, self.cbam_params(p)) if self.use_cbam else x
        pooled = F_hat.mean(axis=(2, 3))
        logits = pooled @ p["head.weight"].T + p["head.bias"]
        return logits, F_hat

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in self.params.items()}
