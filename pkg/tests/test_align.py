import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixalign.align import alignment_loss, channel_descriptor, drop_absent_domains
from mixalign.tensor import ShapeError, Tensor


def test_descriptor_is_spatial_mean():
    F = np.zeros((1, 2, 2, 2))
    F[0, 0] = [[1, 3], [5, 7]]
    assert channel_descriptor(Tensor(F)).data[0, 0] == 4.0


def test_descriptor_of_constant_map():
    np.testing.assert_array_equal(channel_descriptor(Tensor(np.full((3, 4, 2, 5), 1.5))).data, 1.5)


def test_descriptor_gradient_is_one_over_hw():
    F = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)), requires_grad=True)
    channel_descriptor(F).sum().backward()
    np.testing.assert_allclose(F.grad, 1 / 16)


def test_two_domain_example_is_log_two():
    f = Tensor([[1.0], [3.0]])
    loss = alignment_loss(f, drop_absent_domains([0, 1]))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_unequal_group_sizes_use_domain_means():
    f = Tensor([[0.0], [2.0], [3.0]])
    # domain means 1 and 3 -> variance 1
    loss = alignment_loss(f, drop_absent_domains([5, 5, 9]))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_single_domain_gives_zero():
    f = Tensor(np.random.default_rng(1).normal(size=(6, 4)))
    assert alignment_loss(f, drop_absent_domains([2] * 6)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.booleans())
def test_zero_iff_domain_means_coincide(seed, n_domains, coincide):
    rng = np.random.default_rng(seed)
    C, per = 3, 4
    means = np.tile(rng.normal(size=C), (n_domains, 1))
    if not coincide:
        means[-1, rng.integers(C)] += rng.uniform(0.1, 2.0)
    rows, ids = [], []
    for d in range(n_domains):
        noise = rng.normal(size=(per, C))
        noise -= noise.mean(axis=0)
        rows.append(means[d] + noise)
        ids += [d] * per
    loss = alignment_loss(Tensor(np.vstack(rows)), drop_absent_domains(ids)).item()
    if coincide:
        assert loss == pytest.approx(0.0, abs=1e-12)
    else:
        assert loss > 1e-4


def test_partition_keeps_only_present_domains():
    part = drop_absent_domains([0, 0, 2], known_domains=[0, 1, 2])
    assert part.n_domains == 2 and part.n_samples == 3
    np.testing.assert_array_equal(part.groups[0], [0, 1])
    np.testing.assert_array_equal(part.groups[2], [2])


def test_partition_rejects_unknown_ids():
    with pytest.raises(ValueError):
        drop_absent_domains([0, 7], known_domains=[0, 1])


def test_empty_batch_gives_empty_partition_and_undefined_loss():
    part = drop_absent_domains([])
    assert part.n_domains == 0
    with pytest.raises(ValueError):
        alignment_loss(Tensor(np.zeros((0, 3))), part)


def test_shape_checks():
    with pytest.raises(ShapeError):
        channel_descriptor(Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        alignment_loss(Tensor(np.zeros((2, 3, 1))), drop_absent_domains([0, 1]))
