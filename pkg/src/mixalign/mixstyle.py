"""Feature-statistic style mixing between instances of a batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, take

__all__ = [
    "MixStyleConfig",
    "ChannelStats",
    "channel_stats",
    "mix_statistics",
    "sample_beta",
    "mixstyle_forward",
    "restyle",
]


@dataclass
class MixStyleConfig:
    alpha: float = 0.1
    epsilon: float = 1e-6
    apply_probability: float = 0.5
    active: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError(f"apply_probability must lie in [0, 1], got {self.apply_probability}")


@dataclass
class ChannelStats:
    """Per-(instance, channel) spatial mean and standard deviation, shaped [B, C, 1, 1]."""

    mu: Tensor
    sigma: Tensor


def channel_stats(x: Tensor, epsilon: float = 1e-6) -> ChannelStats:
    # epsilon is accepted for signature symmetry; it enters only the
    # re-standardization denominator, never sigma itself.
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"zero spatial extent in {x.shape}")
    mu = x.mean(axis=(2, 3), keepdims=True)
    sigma = x.var(axis=(2, 3), keepdims=True).sqrt()
    return ChannelStats(mu, sigma)


def mix_statistics(stats: ChannelStats, stats_partner: ChannelStats, lam) -> ChannelStats:
    """Convexly combine statistics: ``lam * own + (1 - lam) * partner``.

    ``lam`` is a scalar or one weight per instance (broadcast over channels).
    """
    if stats.mu.shape != stats_partner.mu.shape or stats.sigma.shape != stats_partner.sigma.shape:
        raise ShapeError(f"statistics shape mismatch: {stats.mu.shape} vs {stats_partner.mu.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape(-1, 1, 1, 1)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing weights must lie in [0, 1]")
    mu = stats.mu * lam + stats_partner.mu * (1.0 - lam)
    sigma = stats.sigma * lam + stats_partner.sigma * (1.0 - lam)
    return ChannelStats(mu, sigma)


def sample_beta(alpha: float, rng: np.random.Generator, size=None):
    """Draw from Beta(alpha, alpha) as a ratio of two Gamma(alpha) variates."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    g1 = rng.standard_gamma(alpha, size=size)
    g2 = rng.standard_gamma(alpha, size=size)
    total = g1 + g2
    # both gammas can underflow to 0 for tiny alpha; the limit law is a fair coin
    with np.errstate(invalid="ignore"):
        out = np.where(total > 0, g1 / np.where(total > 0, total, 1.0), rng.integers(0, 2, size=size))
    return float(out) if size is None else out.astype(np.float64)


def restyle(x: Tensor, partner: Tensor, lam, epsilon: float = 1e-6) -> Tensor:
    """Re-standardize ``x`` with statistics mixed from ``x`` and ``partner``."""
    own = channel_stats(x)
    other = channel_stats(partner)
    mixed = mix_statistics(own, other, lam)
    normalized = (x - own.mu) / (own.sigma + epsilon)
    return mixed.sigma * normalized + mixed.mu


def mixstyle_forward(x: Tensor, cfg: MixStyleConfig, rng: np.random.Generator | None) -> Tensor:
    """Apply style mixing in training mode; identity otherwise.

    The layer is skipped (returning ``x`` itself) when ``cfg.active`` is false
    or the per-batch Bernoulli(apply_probability) draw fails. When applied,
    every instance is paired with ``x[perm]`` for a uniform random
    permutation and gets its own Beta(alpha, alpha) weight.
    """
    if not cfg.active or cfg.apply_probability == 0.0:
        return x
    if rng is None:
        raise ValueError("an active MixStyle layer needs a random generator")
    if rng.random() >= cfg.apply_probability:
        return x
    batch = x.shape[0]
    if batch < 2:
        raise ShapeError(f"MixStyle needs a batch of at least 2 instances, got {batch}")
    lam = sample_beta(cfg.alpha, rng, size=batch)
    perm = rng.permutation(batch)
    return restyle(x, take(x, perm, axis=0), lam, cfg.epsilon)
