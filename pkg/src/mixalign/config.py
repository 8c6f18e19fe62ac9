"""Experiment configuration: one INI section per component, flat ``key = value`` lines.

Grammar (parsed with :mod:`configparser`, interpolation off)::

    [section]
    key = value        ; ints, floats, true/false, comma-separated tuples

Sections: run, optim, model, mixstyle, cbam, align, kd, ema, data, augment.
Missing keys take their defaults. Unknown sections or keys are an error.
``TrainConfig.dumps`` writes every key, and ``TrainConfig.loads`` of that
text gives back an equal object.
"""

from __future__ import annotations

import configparser
import hashlib
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig

__all__ = [
    "ConfigError",
    "TrainConfig",
    "RunSection",
    "OptimSection",
    "ModelSection",
    "MixStyleSection",
    "CbamSection",
    "AlignSection",
    "KdSection",
    "EmaSection",
    "DataSection",
    "AugmentSection",
    "COMPONENTS",
]

COMPONENTS = ("none", "mixstyle", "align", "kd", "all")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    early_stopping_patience: int = 10
    monitor: str = "ema"
    threshold: float = 0.5
    out_dir: str = "runs/default"


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    plateau_min_delta: float = 1e-4
    lr_min: float = 1e-5


@dataclass
class ModelSection:
    widths: tuple[int, ...] = (16, 32, 64)


@dataclass
class MixStyleSection:
    enabled: bool = True
    alpha: float = 0.1
    p: float = 0.5
    eps: float = 1e-6
    stages: tuple[int, ...] = (1, 2)


@dataclass
class CbamSection:
    enabled: bool = True
    reduction: int = 8
    kernel: int = 7


@dataclass
class AlignSection:
    enabled: bool = True
    dann_gamma: float = 10.0


@dataclass
class KdSection:
    enabled: bool = True
    temperature: float = 2.0
    weight: float = 0.5
    warmup_epochs: int = 10
    every: int = 1


@dataclass
class EmaSection:
    momentum: float = 0.999
    # momentum min(m, (1 + t) / (10 + t)) at step t
    warmup: bool = True


@dataclass
class DataSection:
    n_train_domains: int = 5
    n_heldout_domains: int = 2
    n_per_domain: int = 1000
    imbalance_ratio: float = 4.0
    val_fraction: float = 0.25
    # None: follow run.seed
    seed: typing.Optional[int] = None


@dataclass
class AugmentSection(AugmentConfig):
    enabled: bool = True

    def to_config(self) -> AugmentConfig | None:
        if not self.enabled:
            return None
        values = {f.name: getattr(self, f.name) for f in fields(AugmentConfig)}
        return AugmentConfig(**values)


_SECTIONS = {
    "run": RunSection,
    "optim": OptimSection,
    "model": ModelSection,
    "mixstyle": MixStyleSection,
    "cbam": CbamSection,
    "align": AlignSection,
    "kd": KdSection,
    "ema": EmaSection,
    "data": DataSection,
    "augment": AugmentSection,
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, annotation, where: str):
    text = text.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is typing.Union:
            inner = [a for a in args if a is not type(None)]
            if text.lower() in ("", "none"):
                return None
            return _parse(text, inner[0], where)
        if origin is tuple:
            items = [t for t in text.split(",") if t.strip()]
            elem = args[0]
            if len(args) == 2 and args[1] is not Ellipsis:
                if len(items) != 2:
                    raise ValueError(f"expected 2 values, got {len(items)}")
            return tuple(_parse(t, elem, where) for t in items)
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported type {annotation}")


def _hints(cls):
    return typing.get_type_hints(cls)


@dataclass
class TrainConfig:
    run: RunSection = field(default_factory=RunSection)
    optim: OptimSection = field(default_factory=OptimSection)
    model: ModelSection = field(default_factory=ModelSection)
    mixstyle: MixStyleSection = field(default_factory=MixStyleSection)
    cbam: CbamSection = field(default_factory=CbamSection)
    align: AlignSection = field(default_factory=AlignSection)
    kd: KdSection = field(default_factory=KdSection)
    ema: EmaSection = field(default_factory=EmaSection)
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)

    # -- text round trip ---------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for name in _SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                value = getattr(section, f.name)
                lines.append(f"{f.name} = {'none' if value is None else _format(value)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def loads(cls, text: str) -> TrainConfig:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".replace("\n", " ")) from None
        unknown = [s for s in parser.sections() if s not in _SECTIONS]
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            hints = _hints(section_cls)
            values = {}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in hints:
                        raise ConfigError(f"unknown key {name}.{key}")
                    values[key] = _parse(raw, hints[key], f"{name}.{key}")
            try:
                sections[name] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        config = cls(**sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.loads(text)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -- semantics -----------------------------------------------------------
    def validate(self) -> None:
        checks = [
            (self.run.epochs >= 1, "run.epochs must be >= 1"),
            (self.run.batch_size >= 2, "run.batch_size must be >= 2"),
            (self.run.early_stopping_patience >= 1, "run.early_stopping_patience must be >= 1"),
            (self.run.monitor in ("ema", "student", "auto"), "run.monitor must be ema, student or auto"),
            (0.0 < self.run.threshold < 1.0, "run.threshold must lie in (0, 1)"),
            (self.optim.lr > 0, "optim.lr must be > 0"),
            (self.optim.weight_decay >= 0, "optim.weight_decay must be >= 0"),
            (all(0 <= b < 1 for b in self.optim.betas), "optim.betas must lie in [0, 1)"),
            (self.optim.max_grad_norm > 0, "optim.max_grad_norm must be > 0"),
            (0 < self.optim.plateau_factor < 1, "optim.plateau_factor must lie in (0, 1)"),
            (len(self.model.widths) >= 1 and all(w >= 1 for w in self.model.widths), "model.widths must be positive"),
            (self.kd.temperature > 0, "kd.temperature must be > 0"),
            (self.kd.every >= 1, "kd.every must be >= 1"),
            (0 <= self.ema.momentum < 1, "ema.momentum must lie in [0, 1)"),
            (self.mixstyle.alpha > 0, "mixstyle.alpha must be > 0"),
            (self.mixstyle.eps > 0, "mixstyle.eps must be > 0"),
            (0 <= self.mixstyle.p <= 1, "mixstyle.p must lie in [0, 1]"),
            (all(1 <= s <= len(self.model.widths) for s in self.mixstyle.stages),
             "mixstyle.stages must name stages 1..len(model.widths)"),
            (self.cbam.reduction >= 1 and self.model.widths[-1] % self.cbam.reduction == 0,
             "cbam.reduction must divide the last model width"),
            (self.cbam.kernel >= 1 and self.cbam.kernel % 2 == 1, "cbam.kernel must be odd"),
            (self.align.dann_gamma >= 0, "align.dann_gamma must be >= 0"),
            (self.kd.weight >= 0, "kd.weight must be >= 0"),
            (self.kd.warmup_epochs >= 0, "kd.warmup_epochs must be >= 0"),
            (self.data.n_train_domains >= 2, "data.n_train_domains must be >= 2"),
            (self.data.n_heldout_domains >= 1, "data.n_heldout_domains must be >= 1"),
            (self.data.imbalance_ratio > 0, "data.imbalance_ratio must be > 0"),
            (self.data.n_per_domain >= 2, "data.n_per_domain must be >= 2"),
            (0 < self.data.val_fraction < 1, "data.val_fraction must lie in (0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> TrainConfig:
        clone = TrainConfig.loads(self.dumps())
        clone.run.seed = int(seed)
        return clone

    def with_components(self, component: str) -> TrainConfig:
        """Copy with exactly the named recipe component(s) switched on."""
        if component not in COMPONENTS:
            raise ConfigError(f"unknown component {component!r}; expected one of {', '.join(COMPONENTS)}")
        clone = TrainConfig.loads(self.dumps())
        for name in ("mixstyle", "align", "kd"):
            getattr(clone, name).enabled = component in (name, "all")
        return clone

    def as_dict(self) -> dict:
        return asdict(self)

    def estimator_params(self) -> dict:
        """Keyword arguments for :class:`~mixalign.estimator.MixAlignDistilClassifier`."""
        return dict(
            widths=tuple(self.model.widths),
            mixstyle=self.mixstyle.enabled,
            mixstyle_alpha=self.mixstyle.alpha,
            mixstyle_p=self.mixstyle.p,
            mixstyle_eps=self.mixstyle.eps,
            mixstyle_stages=tuple(self.mixstyle.stages),
            cbam=self.cbam.enabled,
            cbam_reduction=self.cbam.reduction,
            cbam_kernel=self.cbam.kernel,
            align=self.align.enabled,
            dann_gamma=self.align.dann_gamma,
            kd=self.kd.enabled,
            kd_temperature=self.kd.temperature,
            kd_weight=self.kd.weight,
            kd_warmup_epochs=self.kd.warmup_epochs,
            kd_every=self.kd.every,
            ema_momentum=self.ema.momentum,
            ema_warmup=self.ema.warmup,
            monitor=self.run.monitor,
            lr=self.optim.lr,
            weight_decay=self.optim.weight_decay,
            betas=tuple(self.optim.betas),
            adam_eps=self.optim.eps,
            max_grad_norm=self.optim.max_grad_norm,
            plateau_patience=self.optim.plateau_patience,
            plateau_factor=self.optim.plateau_factor,
            plateau_min_delta=self.optim.plateau_min_delta,
            lr_min=self.optim.lr_min,
            epochs=self.run.epochs,
            batch_size=self.run.batch_size,
            early_stopping_patience=self.run.early_stopping_patience,
            threshold=self.run.threshold,
            augmentation=self.augment.to_config(),
            random_state=self.run.seed,
        )
