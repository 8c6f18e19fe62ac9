import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import same_arrays
from mixalign.data import iterate_batches
from mixalign.distill import EmaTeacher
from mixalign.estimator import MixAlignDistilClassifier
from mixalign.mixstyle import MixStyleConfig
from mixalign.network import Network
from mixalign.objective import bce_with_logits, binary_logit
from mixalign.optim import AdamW, clip_grad_norm
from mixalign.tensor import Tensor


def fit(split, epochs=1, **kw):
    clf = MixAlignDistilClassifier(epochs=epochs, **kw)
    t = split.train
    return clf.fit(t.images, t.labels, t.domain_ids, eval_set=(split.val.images, split.val.labels))


def test_sklearn_protocol(tiny_params):
    clf = MixAlignDistilClassifier(**tiny_params)
    params = clf.get_params()
    assert params["widths"] == (4, 8, 8) and params["ema_momentum"] == 0.999
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    clf.set_params(kd=False)
    assert clf.kd is False


def test_unfitted_and_bad_input(tiny_params, tiny_split):
    clf = MixAlignDistilClassifier(**tiny_params)
    with pytest.raises(NotFittedError):
        clf.predict(tiny_split.val.images)
    X, y = tiny_split.train.images, tiny_split.train.labels
    with pytest.raises(ValueError):
        clf.fit(X[:, :, :16, :16], y)
    with pytest.raises(ValueError):
        clf.fit(X, np.full(len(y), 2))
    with pytest.raises(ValueError):
        clf.fit(X, y[:-1])
    with pytest.raises(ValueError):
        clf.fit(X, y, domains=np.zeros(3))
    with pytest.raises(ValueError):
        MixAlignDistilClassifier(monitor="best", **tiny_params).fit(X, y)


def test_fitted_outputs(tiny_params, tiny_split):
    clf = fit(tiny_split, **tiny_params)
    proba = clf.predict_proba(tiny_split.heldout.images)
    assert proba.shape == (len(tiny_split.heldout), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert set(np.unique(clf.predict(tiny_split.heldout.images))) <= {0, 1}
    assert 0.0 <= clf.score(tiny_split.val.images, tiny_split.val.labels) <= 1.0
    row = clf.history_[0]
    for key in ("l_cls", "l_align", "l_kd", "lambda_align", "lambda_kd", "l_total", "lr",
                "val_ema_balanced_accuracy", "val_student_roc_auc"):
        assert key in row
    assert row["l_total"] == pytest.approx(
        row["l_cls"] + row["lambda_align"] * row["l_align"] + row["lambda_kd"] * row["l_kd"], abs=1e-9)


def test_state_round_trip_predicts_identically(tiny_params, tiny_split):
    clf = fit(tiny_split, **tiny_params)
    meta, arrays = clf.state()
    twin = MixAlignDistilClassifier.from_state(meta, arrays)
    np.testing.assert_array_equal(
        twin.predict_proba(tiny_split.heldout.images), clf.predict_proba(tiny_split.heldout.images))
    assert twin.get_params() == clf.get_params()


class _Interrupt(Exception):
    pass


def test_resume_is_bit_exact(tiny_params, tiny_split):
    """Two epochs straight through equal one epoch, save/load, then the second."""
    t = tiny_split.train
    args = (t.images, t.labels, t.domain_ids)
    val = (tiny_split.val.images, tiny_split.val.labels)
    straight = MixAlignDistilClassifier(epochs=2, **tiny_params).fit(*args, eval_set=val)

    def kill(est, row):
        raise _Interrupt

    first = MixAlignDistilClassifier(epochs=2, **tiny_params)
    with pytest.raises(_Interrupt):
        first.fit(*args, eval_set=val, callbacks=[kill])
    assert first.epoch_ == 1
    resumed = MixAlignDistilClassifier.from_state(*first.state())
    resumed.set_params(warm_start=True)
    resumed.fit(*args, eval_set=val)
    assert same_arrays(straight.network_.arrays(), resumed.network_.arrays())
    assert same_arrays(straight.teacher_.params, resumed.teacher_.params)
    assert same_arrays(straight.optimizer_.state_arrays(), resumed.optimizer_.state_arrays())
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]
    assert strip(straight.history_) == strip(resumed.history_)


def test_baseline_equals_hand_built_bce_loop(tiny_split):
    """All recipe components off and no augmentation: plain BCE with AdamW."""
    t = tiny_split.train
    clf = MixAlignDistilClassifier(
        widths=(4, 8, 8), cbam_reduction=4, batch_size=16, random_state=3, epochs=2,
        mixstyle=False, align=False, kd=False, augmentation=None,
    ).fit(t.images, t.labels, t.domain_ids)

    rng = np.random.default_rng(3)
    net = Network.create(rng, widths=(4, 8, 8), cbam_reduction=4, mixstyle=MixStyleConfig(active=False))
    net.fit_input_scaling(t.images)
    opt = AdamW(net.arrays(), lr=1e-3, weight_decay=1e-2)
    for _ in range(2):
        for idx in iterate_batches(t.domain_ids, 16, rng):
            net.zero_grad()
            logits, _ = net.forward(Tensor(t.images[idx]))
            bce_with_logits(binary_logit(logits), t.labels[idx]).backward()
            grads = net.grads()
            clip_grad_norm(grads, 1.0)
            opt.step(grads)
    assert same_arrays(clf.network_.arrays(), net.arrays())
    assert all(r["l_align"] == 0 and r["l_kd"] == 0 for r in clf.history_)


def test_teacher_tracks_student_through_training(tiny_params, tiny_split):
    clf = fit(tiny_split, **tiny_params, kd=False)
    student, teacher = clf.network_.arrays(), clf.teacher_.params
    assert not same_arrays(student, teacher)
    for k in student:
        assert np.all(np.isfinite(teacher[k]))


def test_ema_warmup_ramp():
    t = EmaTeacher({"w": Tensor([0.0])}, momentum=0.999, warmup=True)
    assert t.momentum_at(0) == pytest.approx(0.1)
    assert t.momentum_at(8989) < 0.999
    assert t.momentum_at(8990) == pytest.approx(0.999)
    assert t.momentum_at(10**6) == 0.999
    assert EmaTeacher({"w": Tensor([0.0])}, momentum=0.999).momentum_at(0) == 0.999
    # by hand: m = 1/10, 2/11, 3/12 gives 2.7, then 5.4, then 8.1
    ramp = EmaTeacher({"w": Tensor([0.0])}, momentum=0.999, warmup=True)
    for step, value in enumerate([3.0, 6.0, 9.0]):
        ramp.update({"w": Tensor([value])}, step=step)
    assert ramp.params["w"][0] == pytest.approx(8.1)


def test_monitor_choices(tiny_params, tiny_split):
    assert MixAlignDistilClassifier(monitor="auto", kd=False).monitored_model_ == "student"
    assert MixAlignDistilClassifier(monitor="auto").monitored_model_ == "ema"
    clf = fit(tiny_split, monitor="student", restore_best=False, **tiny_params)
    assert same_arrays(clf.inference_params(), clf.network_.arrays())
