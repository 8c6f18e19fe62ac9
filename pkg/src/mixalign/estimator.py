"""Scikit-learn compatible classifier wrapping the mix / align / distil recipe.

``MixAlignDistilClassifier.fit`` trains the small CNN with

* style mixing after the first two convolution stages,
* an alignment penalty on attention-refined features across domains,
  weighted by the domain-adaptation ramp,
* distillation from an exponential-moving-average teacher, warmed up
  linearly over the first epochs,

and keeps the teacher as the monitored (and returned) model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .align import alignment_loss, channel_descriptor, drop_absent_domains
from .augment import AugmentConfig, augment_batch
from .data import iterate_batches
from .distill import EmaTeacher, KdConfig, kd_loss
from .metrics import MetricsReport, evaluate_scores
from .mixstyle import MixStyleConfig
from .network import Network
from .objective import LossBreakdown, bce_with_logits, binary_logit, dann_lambda, kd_lambda, total_loss
from .optim import AdamW, ReduceLROnPlateau, clip_grad_norm
from .tensor import Tensor, no_grad, softmax

__all__ = ["MixAlignDistilClassifier", "NonFiniteLossError", "StepRecord"]

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; ``batch`` holds the offending inputs."""

    def __init__(self, message, batch: dict):
        super().__init__(message)
        self.batch = batch


@dataclass
class StepRecord:
    breakdown: LossBreakdown
    grad_norm: float


def _check_images(X, in_channels=3, image_size=32):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1:] != (in_channels, image_size, image_size):
        raise ValueError(f"expected images of shape (n, {in_channels}, {image_size}, {image_size}), got {X.shape}")
    return X


class MixAlignDistilClassifier(ClassifierMixin, BaseEstimator):
    """Binary image classifier trained for robustness to unseen domains.

    Parameters mirror the training configuration; set ``mixstyle``,
    ``align`` or ``kd`` to False to ablate a component. ``monitor`` picks the
    model used for validation, early stopping and prediction: ``"ema"``,
    ``"student"`` or ``"auto"`` (the teacher only when distillation is on).
    The default follows the EMA teacher for every ablation, so all variants
    are selected and scored the same way. ``ema_warmup`` caps the teacher
    momentum at ``(1 + t) / (10 + t)`` after step ``t``, so the teacher
    follows the recent student until that cap passes ``ema_momentum``.

    ``score`` returns balanced accuracy rather than plain accuracy.
    """

    def __init__(
        self,
        *,
        widths=(16, 32, 64),
        mixstyle=True,
        mixstyle_alpha=0.1,
        mixstyle_p=0.5,
        mixstyle_eps=1e-6,
        mixstyle_stages=(1, 2),
        cbam=True,
        cbam_reduction=8,
        cbam_kernel=7,
        align=True,
        dann_gamma=10.0,
        kd=True,
        kd_temperature=2.0,
        kd_weight=0.5,
        kd_warmup_epochs=10,
        kd_every=1,
        ema_momentum=0.999,
        ema_warmup=True,
        monitor="ema",
        lr=1e-3,
        weight_decay=1e-2,
        betas=(0.9, 0.999),
        adam_eps=1e-8,
        max_grad_norm=1.0,
        plateau_patience=5,
        plateau_factor=0.5,
        plateau_min_delta=1e-4,
        lr_min=1e-5,
        epochs=60,
        batch_size=32,
        early_stopping_patience=10,
        restore_best=True,
        threshold=0.5,
        augmentation="default",
        random_state=0,
        warm_start=False,
        verbose=0,
    ):
        self.widths = widths
        self.mixstyle = mixstyle
        self.mixstyle_alpha = mixstyle_alpha
        self.mixstyle_p = mixstyle_p
        self.mixstyle_eps = mixstyle_eps
        self.mixstyle_stages = mixstyle_stages
        self.cbam = cbam
        self.cbam_reduction = cbam_reduction
        self.cbam_kernel = cbam_kernel
        self.align = align
        self.dann_gamma = dann_gamma
        self.kd = kd
        self.kd_temperature = kd_temperature
        self.kd_weight = kd_weight
        self.kd_warmup_epochs = kd_warmup_epochs
        self.kd_every = kd_every
        self.ema_momentum = ema_momentum
        self.ema_warmup = ema_warmup
        self.monitor = monitor
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.adam_eps = adam_eps
        self.max_grad_norm = max_grad_norm
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.plateau_min_delta = plateau_min_delta
        self.lr_min = lr_min
        self.epochs = epochs
        self.batch_size = batch_size
        self.early_stopping_patience = early_stopping_patience
        self.restore_best = restore_best
        self.threshold = threshold
        self.augmentation = augmentation
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    # ------------------------------------------------------------------
    # configuration helpers
    # ------------------------------------------------------------------
    def _augment_config(self):
        if self.augmentation is None or self.augmentation is False:
            return None
        if isinstance(self.augmentation, AugmentConfig):
            return self.augmentation
        if self.augmentation == "default":
            return AugmentConfig()
        if isinstance(self.augmentation, dict):
            return AugmentConfig(**self.augmentation)
        raise ValueError(f"augmentation must be 'default', None, a dict or an AugmentConfig, got {self.augmentation!r}")

    def _kd_config(self) -> KdConfig:
        return KdConfig(self.kd_temperature, self.kd_weight, self.kd_warmup_epochs)

    @property
    def monitored_model_(self) -> str:
        if self.monitor == "auto":
            return "ema" if self.kd else "student"
        if self.monitor not in ("ema", "student"):
            raise ValueError(f"monitor must be 'auto', 'ema' or 'student', got {self.monitor!r}")
        return self.monitor

    def _build_network(self, rng) -> Network:
        return Network.create(
            rng,
            widths=tuple(self.widths),
            cbam_reduction=self.cbam_reduction,
            cbam_kernel=self.cbam_kernel,
            mixstyle_stages=tuple(self.mixstyle_stages),
            mixstyle=MixStyleConfig(
                alpha=self.mixstyle_alpha,
                epsilon=self.mixstyle_eps,
                apply_probability=self.mixstyle_p,
                active=bool(self.mixstyle),
            ),
            use_cbam=bool(self.cbam),
        )

    def _initialize(self):
        self.rng_ = np.random.default_rng(self.random_state)
        self.network_ = self._build_network(self.rng_)
        self.teacher_ = EmaTeacher(self.network_.params, self.ema_momentum, warmup=bool(self.ema_warmup))
        self.optimizer_ = AdamW(
            self.network_.arrays(), lr=self.lr, weight_decay=self.weight_decay, betas=self.betas, eps=self.adam_eps
        )
        self.scheduler_ = ReduceLROnPlateau(
            self.lr, self.plateau_patience, self.plateau_factor, self.plateau_min_delta, self.lr_min
        )
        self.epoch_ = 0
        self.step_ = 0
        self.history_ = []
        self.best_score_ = -np.inf
        self.best_epoch_ = -1
        self.best_params_ = None
        self.bad_epochs_ = 0
        self.stopped_early_ = False
        self.classes_ = np.array([0, 1])

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------
    def steps_per_epoch(self, n_samples: int) -> int:
        full, rest = divmod(n_samples, self.batch_size)
        return full + (1 if rest >= 2 else 0)

    def fit(self, X, y, domains=None, eval_set=None, callbacks=()):
        """Train on images ``X`` (n, 3, 32, 32) with binary labels ``y``.

        ``domains`` gives an integer domain id per sample (all zeros when
        omitted, which disables the alignment term). ``eval_set=(X_val,
        y_val)`` enables validation metrics, the plateau scheduler and early
        stopping. Each callback is called as ``cb(self, row)`` after every
        epoch.
        """
        self.monitored_model_  # validates ``monitor`` before any work
        X = _check_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        domains = np.zeros(len(y), dtype=np.int64) if domains is None else np.asarray(domains, dtype=np.int64)
        if len(domains) != len(y):
            raise ValueError("domains must have one entry per sample")
        if eval_set is not None:
            X_val, y_val = eval_set
            eval_set = (_check_images(X_val), np.asarray(y_val))

        if not (self.warm_start and hasattr(self, "network_")):
            self._initialize()
            self.network_.fit_input_scaling(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.total_steps_ = self.epochs * self.steps_per_epoch(len(y))
        augment_cfg = self._augment_config()
        kd_cfg = self._kd_config()

        while self.epoch_ < self.epochs and not self.stopped_early_:
            row = self._fit_epoch(X, y, domains, eval_set, augment_cfg, kd_cfg)
            self.history_.append(row)
            if self.verbose:
                logger.info("epoch %d: %s", row["epoch"], {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
            for cb in callbacks:
                cb(self, row)
        return self

    def _fit_epoch(self, X, y, domains, eval_set, augment_cfg, kd_cfg) -> dict:
        started = time.perf_counter()
        epoch = self.epoch_
        net = self.network_.train()
        lam_kd = kd_lambda(epoch, kd_cfg) if self.kd else 0.0
        records: list[StepRecord] = []
        for idx in iterate_batches(domains, self.batch_size, self.rng_):
            images = augment_batch(X[idx], augment_cfg, self.rng_)
            records.append(self._train_step(images, y[idx], domains[idx], idx, lam_kd))
        self.epoch_ += 1

        row = {"epoch": epoch, "lr": self.optimizer_.lr}
        row.update(_aggregate(records))
        if eval_set is not None:
            X_val, y_val = eval_set
            student = evaluate_scores(self._proba(X_val, "student")[:, 1], y_val, self.threshold)
            ema = evaluate_scores(self._proba(X_val, "ema")[:, 1], y_val, self.threshold)
            row.update({f"val_student_{k}": v for k, v in student.as_row().items()})
            row.update({f"val_ema_{k}": v for k, v in ema.as_row().items()})
            score = (ema if self.monitored_model_ == "ema" else student).balanced_accuracy
            self._after_validation(score, epoch)
        else:
            self.best_params_ = None
        row["seconds"] = time.perf_counter() - started
        return row

    def _after_validation(self, score: float, epoch: int) -> None:
        self.optimizer_.lr = self.scheduler_.step(score)
        if score > self.best_score_:
            self.best_score_ = score
            self.best_epoch_ = epoch
            self.best_params_ = {k: v.copy() for k, v in self._monitored_arrays().items()}
            self.bad_epochs_ = 0
        else:
            self.bad_epochs_ += 1
            if self.bad_epochs_ >= self.early_stopping_patience:
                self.stopped_early_ = True

    def _train_step(self, images, labels, domain_ids, idx, lam_kd) -> StepRecord:
        net = self.network_
        net.zero_grad()
        logits, F_hat = net.forward(Tensor(images), self.rng_)
        l_cls = bce_with_logits(binary_logit(logits), labels)

        lam_align = dann_lambda(self.step_ / max(self.total_steps_, 1), self.dann_gamma) if self.align else 0.0
        l_align = Tensor(0.0)
        if lam_align > 0:
            partition = drop_absent_domains(domain_ids)
            if partition.n_domains >= 2:
                l_align = alignment_loss(channel_descriptor(F_hat), partition)

        l_kd = Tensor(0.0)
        if lam_kd > 0 and self.step_ % self.kd_every == 0:
            z_teacher = self._teacher_logits(images)
            l_kd = kd_loss(logits, z_teacher, self.kd_temperature)
        else:
            lam_kd = 0.0

        try:
            loss = total_loss(l_cls, l_align, l_kd, lam_align, lam_kd)
            l_total = loss.item()
        except FloatingPointError:
            l_total = float("nan")
        values = LossBreakdown(l_cls.item(), l_align.item(), l_kd.item(), lam_align, lam_kd, l_total)
        if not np.isfinite(values.l_total):
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_}: {values}",
                {"indices": idx, "images": images, "labels": labels, "domains": domain_ids, **values.as_dict()},
            )
        loss.backward()
        grads = net.grads()
        norm = clip_grad_norm(grads, self.max_grad_norm)
        self.optimizer_.step(grads)
        self.teacher_.update(net.params, step=self.step_)
        self.step_ += 1
        return StepRecord(values, norm)

    def _teacher_logits(self, images) -> Tensor:
        """Teacher forward: eval mode (no style mixing), no tape."""
        net = self.network_
        with no_grad():
            net.eval()
            try:
                logits, _ = net.forward(Tensor(images), params=self.teacher_.as_tensors())
            finally:
                net.train()
        return logits

    # ------------------------------------------------------------------
    # checkpoint state
    # ------------------------------------------------------------------
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """Everything needed to resume training bit-exactly: JSON metadata plus named arrays."""
        check_is_fitted(self, "network_")
        params = self.get_params()
        aug = params["augmentation"]
        if isinstance(aug, AugmentConfig):
            params["augmentation"] = {"__augment__": aug.as_dict()}
        meta = {
            "params": params,
            "epoch": self.epoch_,
            "step": self.step_,
            "rng": self.rng_.bit_generator.state,
            "scheduler": self.scheduler_.state_dict(),
            "optimizer": {"lr": self.optimizer_.lr, "step_count": self.optimizer_.step_count},
            "best_score": self.best_score_,
            "best_epoch": self.best_epoch_,
            "bad_epochs": self.bad_epochs_,
            "stopped_early": self.stopped_early_,
            "history": self.history_,
            "n_features_in": getattr(self, "n_features_in_", None),
        }
        arrays = {f"student.{k}": v for k, v in self.network_.arrays().items()}
        arrays.update({f"ema.{k}": v for k, v in self.teacher_.params.items()})
        arrays.update(self.optimizer_.state_arrays())
        if self.best_params_ is not None:
            arrays.update({f"best.{k}": v for k, v in self.best_params_.items()})
        if self.network_.input_mean is not None:
            arrays["input.mean"] = self.network_.input_mean
            arrays["input.std"] = self.network_.input_std
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> MixAlignDistilClassifier:
        params = dict(meta["params"])
        for key in ("widths", "betas", "mixstyle_stages"):
            params[key] = tuple(params[key])
        aug = params.get("augmentation")
        if isinstance(aug, dict) and "__augment__" in aug:
            params["augmentation"] = AugmentConfig(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in aug["__augment__"].items()}
            )
        est = cls(**params)
        est._initialize()
        for name, t in est.network_.params.items():
            t.data[...] = arrays[f"student.{name}"]
        for name, a in est.teacher_.params.items():
            a[...] = arrays[f"ema.{name}"]
        est.optimizer_.load_state_arrays(arrays, meta["optimizer"]["step_count"])
        est.optimizer_.lr = meta["optimizer"]["lr"]
        est.scheduler_.load_state_dict(meta["scheduler"])
        est.rng_.bit_generator.state = meta["rng"]
        if "input.mean" in arrays:
            est.network_.input_mean = arrays["input.mean"].copy()
            est.network_.input_std = arrays["input.std"].copy()
        names = list(est.network_.params)
        if f"best.{names[0]}" in arrays:
            est.best_params_ = {k: arrays[f"best.{k}"].copy() for k in names}
        est.epoch_ = meta["epoch"]
        est.step_ = meta["step"]
        est.best_score_ = meta["best_score"]
        est.best_epoch_ = meta["best_epoch"]
        est.bad_epochs_ = meta["bad_epochs"]
        est.stopped_early_ = meta["stopped_early"]
        est.history_ = list(meta["history"])
        if meta.get("n_features_in") is not None:
            est.n_features_in_ = meta["n_features_in"]
        return est

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------
    def _monitored_arrays(self) -> dict[str, np.ndarray]:
        if self.monitored_model_ == "ema":
            return self.teacher_.params
        return self.network_.arrays()

    def inference_params(self) -> dict[str, np.ndarray]:
        """Weights used by ``predict``: best monitored snapshot, else the current monitored model."""
        check_is_fitted(self, "network_")
        if self.restore_best and self.best_params_ is not None:
            return self.best_params_
        return self._monitored_arrays()

    def _proba(self, X, which: str, batch_size: int = 250) -> np.ndarray:
        arrays = {"student": self.network_.arrays(), "ema": self.teacher_.params, "inference": None}[which]
        if arrays is None:
            arrays = self.inference_params()
        params = {k: Tensor(v) for k, v in arrays.items()}
        net = self.network_
        was_training = net.training
        out = []
        with no_grad():
            net.eval()
            try:
                for lo in range(0, len(X), batch_size):
                    logits, _ = net.forward(Tensor(X[lo:lo + batch_size]), params=params)
                    out.append(softmax(logits, axis=1).data)
            finally:
                net.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self._proba(_check_images(X), "inference")

    def decision_function(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        with np.errstate(divide="ignore"):
            return np.log(proba[:, 1]) - np.log(proba[:, 0])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.classes_[(self.predict_proba(X)[:, 1] >= self.threshold).astype(int)]

    def score(self, X, y, sample_weight=None) -> float:
        return self.evaluate(X, y).balanced_accuracy

    def evaluate(self, X, y) -> MetricsReport:
        return evaluate_scores(self.predict_proba(X)[:, 1], np.asarray(y), self.threshold)


def _aggregate(records: list[StepRecord]) -> dict:
    """Epoch means of the step losses.

    The weights vary per step, so the logged weights are loss-weighted means,
    sum(lambda * l) / sum(l); with them ``l_total = l_cls + lambda_align *
    l_align + lambda_kd * l_kd`` holds for the row as it does for every step.
    """
    if not records:
        return {}
    b = [r.breakdown for r in records]
    n = len(b)
    l_cls = sum(x.l_cls for x in b) / n
    l_align = sum(x.l_align for x in b) / n
    l_kd = sum(x.l_kd for x in b) / n
    align_term = sum(x.lambda_align * x.l_align for x in b) / n
    kd_term = sum(x.lambda_kd * x.l_kd for x in b) / n
    lam_align = align_term / l_align if l_align > 0 else sum(x.lambda_align for x in b) / n
    lam_kd = kd_term / l_kd if l_kd > 0 else sum(x.lambda_kd for x in b) / n
    return {
        "l_cls": l_cls,
        "l_align": l_align,
        "l_kd": l_kd,
        "lambda_align": lam_align,
        "lambda_kd": lam_kd,
        "l_total": sum(x.l_total for x in b) / n,
        "grad_norm": sum(r.grad_norm for r in records) / n,
        "steps": n,
    }
