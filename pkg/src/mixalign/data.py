"""Synthetic multi-domain patches: shape decides the class, domain decides the style.

Content is a dark, roughly elliptical nucleus on a light background. The
positive class adds one to three protrusions to the nucleus outline, which
decide the label on their own. Positives also stain somewhat denser on
average. That second cue is weak and overlaps between classes, and it
lives in absolute intensity, which is exactly what the domain styles
distort. Each domain applies its own channel-wise contrast and colour
offset, blur and sensor noise, all independent of the label, so a model
that leans on stain density does worse on unseen styles than one that
reads the outline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "DomainSpec",
    "DomainBatch",
    "SyntheticSplit",
    "make_domains",
    "generate_content",
    "apply_domain_style",
    "generate_sample",
    "make_split",
    "iterate_batches",
    "protrusion_score",
    "shape_oracle",
    "save_cache",
    "load_cache",
]

IMAGE_SIZE = 32
BACKGROUND = np.array([0.92, 0.78, 0.86])
NUCLEUS = np.array([0.38, 0.22, 0.52])
ORACLE_THRESHOLD = 0.085


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    color_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if any(g <= 0 for g in self.contrast_gain):
            raise ValueError(f"contrast gains must be > 0, got {self.contrast_gain}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be >= 0")


@dataclass
class DomainBatch:
    images: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.domain_ids) != n:
            raise ValueError("images, labels and domain ids need equal leading extents")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SyntheticSplit:
    """Generated train / val / held-out sets plus the domain specs behind them."""

    train: DomainBatch
    val: DomainBatch
    heldout: DomainBatch
    train_domains: list[DomainSpec]
    heldout_domains: list[DomainSpec]
    seed: int
    sample_keys: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> DomainBatch:
        if name not in ("train", "val", "heldout"):
            raise KeyError(f"unknown split {name!r}; expected train, val or heldout")
        return getattr(self, name)


def make_domains(n_train: int = 5, n_heldout: int = 2, seed: int = 0) -> tuple[list[DomainSpec], list[DomainSpec]]:
    """Draw training-domain styles and wider-ranged held-out styles.

    Held-out domains take ids ``n_train .. n_train + n_heldout - 1`` and are
    pushed toward the edges of their range so they sit outside the convex
    hull of the training styles most of the time.
    """
    rng = np.random.default_rng([seed, 7919])

    def draw(domain_id, offset_max, log_gain_max, blur_max, noise_max, extrapolate):
        offset = rng.uniform(-offset_max, offset_max, 3)
        log_gain = rng.uniform(-log_gain_max, log_gain_max, 3)
        if extrapolate:
            # push away from the training centre: magnitude in the outer half of the range
            offset = np.sign(offset) * (0.5 + 0.5 * np.abs(offset) / offset_max) * offset_max
            log_gain = np.sign(log_gain) * (0.5 + 0.5 * np.abs(log_gain) / log_gain_max) * log_gain_max
        return DomainSpec(
            domain_id=domain_id,
            color_offset=tuple(float(v) for v in offset),
            contrast_gain=tuple(float(v) for v in np.exp(log_gain)),
            blur_sigma=float(rng.uniform(0.0, blur_max)),
            noise_sigma=float(rng.uniform(0.0, noise_max)),
        )

    train = [draw(d, 0.08, np.log(1.3), 0.6, 0.03, False) for d in range(n_train)]
    heldout = [draw(n_train + d, 0.14, np.log(1.6), 0.8, 0.05, True) for d in range(n_heldout)]
    return train, heldout


def _angle_gap(a, b):
    return np.angle(np.exp(1j * (a - b)))


def generate_content(class_label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one unstyled RGB patch [3, size, size] with values in [0, 1]."""
    if class_label not in (0, 1):
        raise ValueError(f"class label must be 0 or 1, got {class_label}")
    centre = size / 2 - 0.5 + rng.normal(0.0, 1.2, 2)
    r0 = rng.uniform(5.5, 8.0)
    ecc = rng.uniform(0.0, 0.25)
    phi = rng.uniform(0.0, np.pi)
    n_bumps = rng.integers(1, 4) if class_label == 1 else 0
    bump_angles = rng.uniform(0.0, 2 * np.pi, n_bumps)
    bump_heights = rng.uniform(0.6, 0.9, n_bumps)
    bump_widths = rng.uniform(0.12, 0.2, n_bumps)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.5)
    # condensed chromatin: atypical figures stain denser on average
    chromatin = rng.uniform(0.8, 1.0) if class_label == 1 else rng.uniform(0.6, 0.88)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - centre[0], xx - centre[1]
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    boundary = r0 * (1.0 + ecc * np.cos(2.0 * (theta - phi)))
    for a, h, w in zip(bump_angles, bump_heights, bump_widths):
        boundary = boundary + r0 * h * np.exp(-0.5 * (_angle_gap(theta, a) / w) ** 2)
    density = 1.0 / (1.0 + np.exp(-(boundary - rho) / 0.6))
    density = chromatin * density * np.clip(0.85 + 0.6 * texture, 0.5, 1.0)
    image = BACKGROUND[:, None, None] * (1.0 - density) + NUCLEUS[:, None, None] * density
    return np.clip(image, 0.0, 1.0)


def apply_domain_style(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Channel-wise contrast about the channel mean, colour offset, blur, noise; clamped to [0, 1]."""
    gain = np.asarray(spec.contrast_gain)[:, None, None]
    offset = np.asarray(spec.color_offset)[:, None, None]
    mean = image.mean(axis=(1, 2), keepdims=True)
    # written as a correction to the image so unit gain and zero offset are exact
    out = image + (gain - 1.0) * (image - mean) + offset
    if spec.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(0, spec.blur_sigma, spec.blur_sigma), mode="nearest")
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("a noisy domain style needs a random generator")
        out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def _sample_rng(seed: int, domain_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain_id, index])


def _domain_labels(seed: int, domain_id: int, n: int, imbalance_ratio: float) -> np.ndarray:
    n_pos = int(round(n / (1.0 + imbalance_ratio)))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    return np.random.default_rng([seed, domain_id, 2**31]).permutation(labels)


def generate_sample(seed: int, spec: DomainSpec, index: int, label: int) -> np.ndarray:
    """Styled image for sample ``index`` of a domain; a pure function of its arguments."""
    rng = _sample_rng(seed, spec.domain_id, index)
    return apply_domain_style(generate_content(label, rng), spec, rng)


def _generate_domain(seed, spec, n, imbalance_ratio):
    labels = _domain_labels(seed, spec.domain_id, n, imbalance_ratio)
    images = np.stack([generate_sample(seed, spec, i, int(labels[i])) for i in range(n)])
    return images, labels


def make_split(
    domains: list[DomainSpec] | None = None,
    n_per_domain: int = 1000,
    imbalance_ratio: float = 4.0,
    seed: int = 0,
    heldout_domains: list[DomainSpec] | None = None,
    val_fraction: float = 0.25,
) -> SyntheticSplit:
    """Generate all domains and split training domains 75/25 into train/val.

    ``imbalance_ratio`` is negatives per positive (4.0 means 1:4). The split
    is stratified by domain and class; held-out domains go entirely to the
    held-out set. When ``heldout_domains`` is None the last two entries of
    ``domains`` are held out.
    """
    if domains is None:
        domains, heldout_domains = make_domains(seed=seed)
    elif heldout_domains is None:
        domains, heldout_domains = list(domains[:-2]), list(domains[-2:])
    if len(domains) < 2 or len(heldout_domains) < 1:
        raise ValueError(
            f"need >= 2 training domains and >= 1 held-out domain, got {len(domains)} and {len(heldout_domains)}"
        )
    ids = [d.domain_id for d in list(domains) + list(heldout_domains)]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids {ids}")

    parts: dict[str, list] = {"train": [], "val": [], "heldout": []}
    for spec in domains:
        images, labels = _generate_domain(seed, spec, n_per_domain, imbalance_ratio)
        order_rng = np.random.default_rng([seed, spec.domain_id, 2**31 + 1])
        val_idx = []
        for cls in (0, 1):
            members = order_rng.permutation(np.flatnonzero(labels == cls))
            val_idx.extend(members[: int(round(len(members) * val_fraction))])
        in_val = np.zeros(n_per_domain, dtype=bool)
        in_val[val_idx] = True
        for name, mask in (("train", ~in_val), ("val", in_val)):
            idx = np.flatnonzero(mask)
            parts[name].append((images[idx], labels[idx], spec.domain_id, idx))
    for spec in heldout_domains:
        images, labels = _generate_domain(seed, spec, n_per_domain, imbalance_ratio)
        parts["heldout"].append((images, labels, spec.domain_id, np.arange(n_per_domain)))

    batches, keys = {}, {}
    for name, chunks in parts.items():
        batches[name] = DomainBatch(
            images=np.concatenate([c[0] for c in chunks]),
            labels=np.concatenate([c[1] for c in chunks]),
            domain_ids=np.concatenate([np.full(len(c[1]), c[2], dtype=np.int64) for c in chunks]),
        )
        keys[name] = np.concatenate([np.stack([np.full(len(c[3]), c[2]), c[3]], axis=1) for c in chunks])
    return SyntheticSplit(
        train=batches["train"],
        val=batches["val"],
        heldout=batches["heldout"],
        train_domains=list(domains),
        heldout_domains=list(heldout_domains),
        seed=seed,
        sample_keys=keys,
    )


def iterate_batches(domain_ids: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering every sample once per epoch.

    Samples are shuffled within each domain and dealt round-robin across
    domains, so consecutive positions (and thus each batch) mix domains.
    The final short batch is dropped when it would hold a single sample.
    """
    domain_ids = np.asarray(domain_ids)
    queues = [rng.permutation(np.flatnonzero(domain_ids == d)) for d in np.unique(domain_ids)]
    order = []
    longest = max(len(q) for q in queues)
    start = rng.integers(len(queues))
    for i in range(longest):
        for k in range(len(queues)):
            q = queues[(start + k) % len(queues)]
            if i < len(q):
                order.append(q[i])
    order = np.asarray(order, dtype=np.int64)
    for lo in range(0, len(order), batch_size):
        chunk = order[lo:lo + batch_size]
        if len(chunk) >= 2:
            yield chunk


# ---------------------------------------------------------------------------
# shape oracle, independent of any learned model
# ---------------------------------------------------------------------------

def _radial_profile(image: np.ndarray, n_angles: int = 72) -> np.ndarray:
    # Background is the per-channel median (the nucleus covers a minority of
    # pixels); the nucleus level is whichever tail percentile lies further
    # from it, so inverted channels (e.g. solarized) still read as inside = 1.
    flat = image.reshape(image.shape[0], -1)
    bg = np.median(flat, axis=1)
    lo, hi = np.percentile(flat, [8, 92], axis=1)
    fg = np.where(np.abs(lo - bg) >= np.abs(hi - bg), lo, hi)
    contrast = fg - bg
    weights = np.abs(contrast)
    if weights.sum() < 1e-6:
        return np.zeros(n_angles)
    scaled = (image - bg[:, None, None]) / np.where(weights > 1e-9, contrast, 1.0)[:, None, None]
    darkness = np.tensordot(weights / weights.sum(), scaled, axes=1)
    darkness = ndimage.gaussian_filter(darkness, 0.7)
    mask = darkness > 0.5
    labelled, n = ndimage.label(mask)
    if n == 0:
        return np.zeros(n_angles)
    sizes = ndimage.sum(mask, labelled, range(1, n + 1))
    blob = labelled == (1 + int(np.argmax(sizes)))
    cy, cx = ndimage.center_of_mass(blob)
    darkness = np.where(ndimage.binary_dilation(blob, iterations=1), darkness, 0.0)
    angles = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    radii = np.arange(0.0, image.shape[-1] / 2 + 4, 0.25)
    ys = cy + np.outer(np.sin(angles), radii)
    xs = cx + np.outer(np.cos(angles), radii)
    samples = ndimage.map_coordinates(darkness, [ys, xs], order=1, mode="constant", cval=0.0)
    inside = samples > 0.5
    # outermost radius still inside the nucleus along each ray
    last = np.where(inside.any(axis=1), inside.shape[1] - 1 - np.argmax(inside[:, ::-1], axis=1), 0)
    return radii[last]


def protrusion_score(image: np.ndarray) -> float:
    """Largest outward deviation of the outline from its best second-order Fourier fit, relative to size."""
    profile = _radial_profile(image)
    n = len(profile)
    angles = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    basis = np.stack([np.ones(n), np.cos(angles), np.sin(angles), np.cos(2 * angles), np.sin(2 * angles)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, profile, rcond=None)
    residual = profile - basis @ coef
    return float(residual.max() / max(coef[0], 1e-6))


def shape_oracle(image: np.ndarray, threshold: float = ORACLE_THRESHOLD) -> int:
    """Hand-built classifier: 1 when the outline carries a protrusion."""
    return int(protrusion_score(image) > threshold)


# ---------------------------------------------------------------------------
# optional on-disk cache
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"MADSYNTH"
_CACHE_VERSION = 1


def save_cache(batch: DomainBatch, path, seed: int) -> None:
    """Write ``batch`` as header (magic, version, count, image shape, seed) plus raw little-endian blobs."""
    images = np.ascontiguousarray(batch.images, dtype="<f8")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IQIIIq", _CACHE_VERSION, n, c, h, w, seed))
        fh.write(images.tobytes())
        fh.write(np.ascontiguousarray(batch.labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(batch.domain_ids, dtype="<i8").tobytes())


def load_cache(path) -> tuple[DomainBatch, int]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CACHE_MAGIC:
        raise ValueError(f"{path} is not a synthetic-data cache file")
    header = struct.calcsize("<IQIIIq")
    version, n, c, h, w, seed = struct.unpack("<IQIIIq", raw[8:8 + header])
    if version != _CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    pos = 8 + header
    n_img = n * c * h * w
    images = np.frombuffer(raw, dtype="<f8", count=n_img, offset=pos).reshape(n, c, h, w).astype(np.float64)
    pos += 8 * n_img
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=pos).astype(np.int64)
    pos += 8 * n
    domains = np.frombuffer(raw, dtype="<i8", count=n, offset=pos).astype(np.int64)
    return DomainBatch(images, labels, domains), seed
