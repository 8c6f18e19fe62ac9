"""Domain-aware alignment of pooled feature descriptors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, concat, take

__all__ = ["DomainPartition", "drop_absent_domains", "channel_descriptor", "alignment_loss"]


@dataclass
class DomainPartition:
    """Batch indices grouped by domain id, in ascending domain order."""

    groups: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_domains(self) -> int:
        return len(self.groups)

    @property
    def n_samples(self) -> int:
        return sum(len(idx) for idx in self.groups.values())

    def __iter__(self):
        return iter(self.groups.items())


def drop_absent_domains(domain_ids, known_domains=None) -> DomainPartition:
    """Partition batch positions by domain, keeping only domains that occur.

    ``known_domains`` restricts which ids are accepted; an id outside it
    raises ``ValueError``.
    """
    ids = np.asarray(domain_ids, dtype=np.int64).reshape(-1)
    if known_domains is not None:
        unknown = set(ids.tolist()) - set(int(d) for d in known_domains)
        if unknown:
            raise ValueError(f"domain ids {sorted(unknown)} not in the known domain set")
    groups = {int(d): np.flatnonzero(ids == d) for d in np.unique(ids)}
    return DomainPartition(groups)


def channel_descriptor(F_hat: Tensor) -> Tensor:
    """Global average pooling: [B, C, H, W] -> [B, C]."""
    if F_hat.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W], got {F_hat.shape}")
    return F_hat.mean(axis=(2, 3))


def alignment_loss(f: Tensor, partition: DomainPartition) -> Tensor:
    """Mean over channels of log(1 + s_c^2).

    ``s_c^2`` is the population variance, across the domains present in
    ``partition``, of each domain's mean descriptor for channel ``c``.
    """
    if f.ndim != 2:
        raise ShapeError(f"descriptors must be [B, C], got {f.shape}")
    if partition.n_domains == 0:
        raise ValueError("alignment loss is undefined for an empty partition")
    means = []
    for domain, idx in partition:
        if len(idx) == 0:
            raise ValueError(f"domain {domain} has no samples in this batch")
        means.append(take(f, idx, axis=0).mean(axis=0, keepdims=True))
    domain_means = concat(means, axis=0)
    spread = domain_means.var(axis=0)
    return (spread + 1.0).log().mean()
