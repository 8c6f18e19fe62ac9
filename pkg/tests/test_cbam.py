import numpy as np
import pytest

from mixalign.cbam import CbamParams, cbam_forward, channel_attention, init_cbam, spatial_attention
from mixalign.tensor import ShapeError, Tensor


def params(c=8, r=4, k=7, seed=0):
    return init_cbam(c, np.random.default_rng(seed), reduction=r, kernel_size=k)


def zeroed(p: CbamParams) -> CbamParams:
    for t in (p.w1, p.b1, p.w2, p.b2, p.spatial_kernel, p.spatial_bias):
        t.data[...] = 0.0
    return p


def fmap(shape=(2, 8, 5, 5), seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_attention_shapes():
    p, F = params(), fmap()
    assert channel_attention(F, p).shape == (2, 8, 1, 1)
    assert spatial_attention(F, p).shape == (2, 1, 5, 5)
    assert cbam_forward(F, p).shape == F.shape


def test_gates_lie_strictly_inside_unit_interval():
    p, F = params(), fmap()
    for gate in (channel_attention(F, p).data, spatial_attention(F, p).data):
        assert np.all((gate > 0) & (gate < 1))


def test_zero_weights_give_half_everywhere():
    p, F = zeroed(params()), fmap()
    np.testing.assert_array_equal(channel_attention(F, p).data, 0.5)
    np.testing.assert_array_equal(spatial_attention(F, p).data, 0.5)
    np.testing.assert_allclose(cbam_forward(F, p).data, 0.25 * F.data, rtol=1e-15)


def test_constant_input_gives_spatially_constant_attention_away_from_border():
    # zero padding breaks the symmetry on the border; inside, every window sees the same values
    p = params(k=3)
    F = Tensor(np.full((1, 8, 6, 6), 0.7))
    gate = spatial_attention(F, p).data[0, 0, 1:-1, 1:-1]
    np.testing.assert_allclose(gate, gate[0, 0], rtol=1e-14)


def test_constant_input_with_centre_only_kernel_is_constant_everywhere():
    p = params(k=7)
    p.spatial_kernel.data[...] = 0.0
    p.spatial_kernel.data[0, :, 3, 3] = [0.3, -0.2]
    F = Tensor(np.full((2, 8, 5, 5), -1.2))
    gate = spatial_attention(F, p).data
    np.testing.assert_allclose(gate, gate.flat[0], rtol=1e-14)


def test_saturated_gates_pass_features_through():
    p = zeroed(params())
    p.b2.data[...] = 60.0
    p.spatial_bias.data[...] = 60.0
    F = fmap()
    np.testing.assert_allclose(cbam_forward(F, p).data, F.data, rtol=1e-12)


def test_refinement_is_a_contraction():
    for seed in range(5):
        F = fmap(seed=seed)
        assert np.all(np.abs(cbam_forward(F, params(seed=seed)).data) <= np.abs(F.data))


def test_channel_mismatch_and_bad_construction():
    with pytest.raises(ShapeError):
        channel_attention(fmap((2, 4, 5, 5)), params())
    with pytest.raises(ShapeError):
        cbam_forward(Tensor(np.ones((8, 5, 5))), params())
    with pytest.raises(ValueError):
        init_cbam(10, np.random.default_rng(0), reduction=4)
    with pytest.raises(ValueError):
        init_cbam(8, np.random.default_rng(0), reduction=4, kernel_size=4)
