import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from classkit.errors import DimensionError
from classkit.fusion import FeatureFusion, Head, SumFusion, ffm_forward, head_forward
from classkit.gradcheck import check_gradients
from classkit.tensor import Tensor, bilinear_resize, concat_channels, reduce_sum


def stage_inputs(rng, c=3, h=4, w=6, n=2):
    return (Tensor(rng.normal(size=(n, c, h, w))), Tensor(rng.normal(size=(n, c, (h + 1) // 2, (w + 1) // 2))),
            Tensor(rng.normal(size=(n, c, (h + 1) // 2, (w + 1) // 2))))


def refined_of(ffm, low, high, prev):
    h, w = low.shape[2:]
    x = concat_channels([low, bilinear_resize(high, h, w), bilinear_resize(prev, h, w)])
    return ffm.refine2(ffm.refine1(ffm.compress(x))).data


def test_zero_gate_halves_refined():
    rng = np.random.default_rng(0)
    ffm = FeatureFusion(3, rng)
    ffm.gate_conv.weight.data[...] = 0.0
    ffm.gate_conv.bias.data[...] = 0.0
    ffm.eval()
    low, high, prev = stage_inputs(rng)
    np.testing.assert_allclose(ffm(low, high, prev).data, 0.5 * refined_of(ffm, low, high, prev), rtol=1e-15)


def test_zero_inputs_give_zero_output():
    ffm = FeatureFusion(3, np.random.default_rng(1))
    zeros = [Tensor(np.zeros(t.shape)) for t in stage_inputs(np.random.default_rng(1))]
    np.testing.assert_array_equal(ffm_forward(*zeros, ffm).data, 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(2, 9), st.integers(2, 9), st.integers(0, 2**31))
def test_shape_kept_and_gate_attenuates(c, h, w, seed):
    rng = np.random.default_rng(seed)
    ffm = FeatureFusion(c, rng).eval()
    low, high, prev = stage_inputs(rng, c, h, w, n=1)
    out = ffm(low, high, prev).data
    assert out.shape == low.shape
    assert np.all(np.abs(out) <= np.abs(refined_of(ffm, low, high, prev)))


def test_residual_variant_and_sum_fusion_shapes():
    rng = np.random.default_rng(2)
    low, high, prev = stage_inputs(rng)
    assert FeatureFusion(3, rng, residual=True)(low, high, prev).shape == low.shape
    assert SumFusion(3, rng)(low, high, prev).shape == low.shape


def test_stage_input_checks():
    rng = np.random.default_rng(3)
    ffm = FeatureFusion(3, rng)
    low, high, prev = stage_inputs(rng)
    with pytest.raises(DimensionError):
        ffm(low, high, Tensor(np.ones((2, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ffm(Tensor(np.ones((2, 2, 4, 6))), high, prev)


def test_ffm_gradients():
    rng = np.random.default_rng(4)
    ffm = FeatureFusion(2, rng)
    low, high, prev = (Tensor(t.data, requires_grad=True) for t in stage_inputs(rng, c=2))
    weights = Tensor(rng.normal(size=low.shape))
    inputs = {"low": low, "high": high, "prev": prev, **dict(ffm.named_parameters())}
    errs = check_gradients(lambda: reduce_sum(ffm(low, high, prev) * weights), inputs, rng, max_entries=6)
    assert max(errs.values()) < 1e-4


def test_head_contract():
    rng = np.random.default_rng(5)
    head = Head(3, rng)
    d = Tensor(rng.normal(size=(2, 3, 4, 4)))
    out = head_forward(d, 16, 12, head)
    assert out.shape == (2, 1, 16, 12)
    assert out.data.min() > 0 and out.data.max() < 1
    head.predict_conv.weight.data[...] = 0.0
    np.testing.assert_array_equal(head(d, 8, 8).data, 0.5)
    with pytest.raises(DimensionError):
        head(d, 2, 8)


def test_head_gradients():
    rng = np.random.default_rng(6)
    head = Head(2, rng)
    d = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    weights = Tensor(rng.normal(size=(1, 1, 6, 6)))
    inputs = {"d": d, **dict(head.named_parameters())}
    errs = check_gradients(lambda: reduce_sum(head(d, 6, 6) * weights), inputs)
    assert max(errs.values()) < 1e-4
