import numpy as np
import pytest

from mixalign.distill import EmaTeacher, KdConfig, ema_update, kd_loss
from mixalign.network import Network
from mixalign.tensor import ShapeError, Tensor, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def brute_force_kd(zs, zt, T):
    def soft(z):
        e = [np.exp(v / T) for v in z]
        return [v / sum(e) for v in e]

    ps, pt = soft(zs), soft(zt)
    return T * T * sum(p * np.log(p / q) for p, q in zip(pt, ps))


def test_kd_hand_example():
    loss = kd_loss(Tensor([[0.0, 0.0]]), Tensor([[2.0, 0.0]]), 2.0).item()
    assert loss == pytest.approx(0.4437, abs=1e-3)
    assert loss == pytest.approx(brute_force_kd([0, 0], [2, 0], 2.0), rel=1e-12)


def test_kd_matches_brute_force_on_random_batches():
    rng = np.random.default_rng(0)
    zs, zt = rng.normal(size=(5, 2)) * 3, rng.normal(size=(5, 2)) * 3
    ref = np.mean([brute_force_kd(a, b, 1.7) for a, b in zip(zs, zt)])
    assert kd_loss(Tensor(zs), Tensor(zt), 1.7).item() == pytest.approx(ref, rel=1e-10)


def test_kd_of_identical_logits_is_zero():
    z = np.random.default_rng(1).normal(size=(4, 2))
    assert kd_loss(Tensor(z), Tensor(z.copy()), 2.0).item() == pytest.approx(0.0, abs=1e-15)


def test_kd_gives_teacher_no_gradient():
    zs, zt = leaf([[0.5, -0.2]]), leaf([[2.0, 0.0]])
    kd_loss(zs, zt, 2.0).backward()
    assert zt.grad is None
    assert zs.grad is not None and np.any(zs.grad != 0)


def test_kd_rejects_mismatch_and_nan():
    with pytest.raises(ShapeError):
        kd_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))), 2.0)
    with pytest.raises(FloatingPointError):
        kd_loss(Tensor([[np.nan, 0.0]]), Tensor([[0.0, 0.0]]), 2.0)


def test_ema_substitution_example():
    teacher = EmaTeacher({"w": Tensor([1.0])}, momentum=0.999)
    ema_update(teacher, {"w": Tensor([0.0])}, 0.999)
    assert teacher.params["w"][0] == pytest.approx(0.999, abs=1e-15)


def test_ema_endpoints():
    student = {"w": Tensor(np.arange(3.0))}
    teacher = EmaTeacher({"w": Tensor(np.ones(3))})
    ema_update(teacher, student, 0.0)
    np.testing.assert_array_equal(teacher.params["w"], student["w"].data)

    teacher = EmaTeacher({"w": Tensor(np.ones(3))})
    ema_update(teacher, student, 1 - 1e-12)
    np.testing.assert_allclose(teacher.params["w"], 1.0, atol=1e-11)


def test_ema_is_a_contraction_toward_student():
    rng = np.random.default_rng(2)
    student = {"w": Tensor(rng.normal(size=5))}
    teacher = EmaTeacher({"w": Tensor(rng.normal(size=5))}, momentum=0.9)
    gaps = []
    for _ in range(5):
        gaps.append(np.abs(teacher.params["w"] - student["w"].data).max())
        teacher.update(student)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_ema_copies_and_rejects_mismatch():
    w = Tensor(np.ones(2), requires_grad=True)
    teacher = EmaTeacher({"w": w})
    w.data[...] = 5.0
    np.testing.assert_array_equal(teacher.params["w"], 1.0)
    with pytest.raises(ShapeError):
        ema_update(teacher, {"v": w}, 0.5)
    with pytest.raises(ShapeError):
        ema_update(teacher, {"w": Tensor(np.ones(3))}, 0.5)
    with pytest.raises(ValueError):
        EmaTeacher({"w": w}, momentum=1.0)


def test_kd_config_validation():
    with pytest.raises(ValueError):
        KdConfig(temperature=0.0)
    with pytest.raises(ValueError):
        KdConfig(base_weight=-1.0)


# -- with the real network --------------------------------------------------

def small_net(seed=0):
    return Network.create(np.random.default_rng(seed), widths=(4, 8, 8), cbam_reduction=4)


def batch(seed=3, n=3):
    return np.random.default_rng(seed).random((n, 3, 32, 32))


def test_fresh_teacher_reproduces_student_eval_logits():
    net = small_net().eval()
    teacher = EmaTeacher(net.params)
    x = batch()
    with no_grad():
        zs, _ = net.forward(Tensor(x))
        zt, _ = net.forward(Tensor(x), params=teacher.as_tensors())
    np.testing.assert_array_equal(zs.data, zt.data)
    assert not zt.requires_grad


def test_teacher_bitwise_unchanged_by_student_backward():
    net = small_net().train()
    teacher = EmaTeacher(net.params)
    before = {k: v.copy() for k, v in teacher.params.items()}
    x = batch()
    with no_grad():
        net.eval()
        zt, _ = net.forward(Tensor(x), params=teacher.as_tensors())
        net.train()
    zs, _ = net.forward(Tensor(x), rng=np.random.default_rng(0))
    kd_loss(zs, zt, 2.0).backward()
    assert any(t.grad is not None for t in net.params.values())
    for k, v in teacher.params.items():
        assert np.array_equal(v, before[k])


def test_teacher_logits_move_after_update_when_student_moved():
    net = small_net().eval()
    teacher = EmaTeacher(net.params, momentum=0.5)
    x = batch()
    z0 = net.forward(Tensor(x), params=teacher.as_tensors())[0].data
    for t in net.params.values():
        t.data += 0.05
    teacher.update(net.params)
    z1 = net.forward(Tensor(x), params=teacher.as_tensors())[0].data
    assert not np.allclose(z0, z1)
