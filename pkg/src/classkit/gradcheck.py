"""Central finite-difference gradient checks.

``check_gradients`` compares the analytic gradient of a scalar function with
``(f(x + h) - f(x - h)) / 2h`` entry by entry.  The error reported is
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6)`` over the
checked entries of each input.  ``SUITE`` holds one case per differentiable
operation; ``run_suite`` drives them for the tests and the CLI.  The 1e-6
floor turns the test into an absolute one for gradients that vanish
analytically (a conv bias feeding batch norm), where central differences
only see round-off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import ChannelAttention, CrossLevelAttention, PositionAttention
from .fusion import FeatureFusion, Head
from .losses import RegionConfig, multi_level_loss, object_fmeasure_loss, pixel_bce, region_ssd
from .nn import BatchNorm2d, Conv2d
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), FLOOR)
    return float(diff / scale)


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with T.record_kinks() as pattern:
        value = fn().item()
    return value, pattern


def check_gradients(fn: Callable[[], Tensor], inputs: dict[str, Tensor], rng: np.random.Generator | None = None,
                    max_entries: int | None = None, step: float = STEP,
                    skipped: dict[str, int] | None = None) -> dict[str, float]:
    """Return ``{name: relative error}`` for every input of the scalar function ``fn``.

    An entry whose stencil changes the on/off pattern of any ReLU/clip is not
    differentiable at that scale; it is skipped (and counted in ``skipped``)
    and, when entries are sampled, replaced by another random entry.
    """
    for t in inputs.values():
        t.grad = None
    fn().backward()
    _, base_pattern = _evaluate(fn)
    errors = {}
    for name, t in inputs.items():
        analytic_full = np.zeros(t.shape) if t.grad is None else t.grad.reshape(t.shape)
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            candidates = list(range(flat.size))
            want = flat.size
        else:
            candidates = list(rng.permutation(flat.size))
            want = max_entries
        used, numeric = [], []
        for i in candidates:
            if len(used) == want:
                break
            orig = flat[i]
            flat[i] = orig + step
            plus, pattern_plus = _evaluate(fn)
            flat[i] = orig - step
            minus, pattern_minus = _evaluate(fn)
            flat[i] = orig
            if pattern_plus != base_pattern or pattern_minus != base_pattern:
                if skipped is not None:
                    skipped[name] = skipped.get(name, 0) + 1
                continue
            used.append(i)
            numeric.append((plus - minus) / (2 * step))
        if not used:
            errors[name] = float("nan")
            continue
        idx = np.array(used)
        errors[name] = relative_error(analytic_full.reshape(-1)[idx], np.array(numeric))
    return errors


def _leaf(rng, *shape, low=None, high=None, away_from_zero=False):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (np.abs(data) + 0.1)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _proj_weights(rng, shape):
    return rng.standard_normal(shape)


# each builder returns (fn, inputs, max_entries)

def _case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = _proj_weights(rng, (3, 2))
    return lambda: _project(T.matmul(a, b), w), {"a": a, "b": b}, None


def _case_softmax(rng):
    x = _leaf(rng, 4, 6)
    w = _proj_weights(rng, (4, 6))
    return lambda: _project(T.softmax_rows(x), w), {"x": x}, None


def _case_conv3(rng):
    x, k, b = _leaf(rng, 1, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    w = _proj_weights(rng, (1, 3, 5, 5))
    return lambda: _project(T.conv2d(x, k, b, 1, 1), w), {"x": x, "w": k, "bias": b}, None


def _case_conv_strided(rng):
    x, k, b = _leaf(rng, 2, 2, 6, 7), _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2)
    w = _proj_weights(rng, (2, 2, 3, 4))
    return lambda: _project(T.conv2d(x, k, b, 2, 1), w), {"x": x, "w": k, "bias": b}, None


def _case_conv1(rng):
    x, k, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 1, 1), _leaf(rng, 2)
    w = _proj_weights(rng, (2, 2, 4, 4))
    return lambda: _project(T.conv2d(x, k, b, 1, 0), w), {"x": x, "w": k, "bias": b}, None


def _case_resize(rng):
    x = _leaf(rng, 1, 2, 3, 4)
    w = _proj_weights(rng, (1, 2, 7, 5))
    return lambda: _project(T.bilinear_resize(x, 7, 5), w), {"x": x}, None


def _case_batch_norm(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    gamma, shift = _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    w = _proj_weights(rng, (2, 3, 4, 4))
    fn = lambda: _project(T.batch_norm(x, gamma, shift, rm, rv, training=True), w)  # noqa: E731
    return fn, {"x": x, "gamma": gamma, "shift": shift}, 48


def _case_batch_norm_eval(rng):
    x = _leaf(rng, 2, 3, 3, 3)
    gamma, shift = _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    w = _proj_weights(rng, (2, 3, 3, 3))
    fn = lambda: _project(T.batch_norm(x, gamma, shift, rm, rv, training=False), w)  # noqa: E731
    return fn, {"x": x, "gamma": gamma, "shift": shift}, None


def _case_relu(rng):
    x = _leaf(rng, 3, 5, away_from_zero=True)
    w = _proj_weights(rng, (3, 5))
    return lambda: _project(T.relu(x), w), {"x": x}, None


def _case_sigmoid(rng):
    x = _leaf(rng, 3, 5)
    w = _proj_weights(rng, (3, 5))
    return lambda: _project(T.sigmoid(x), w), {"x": x}, None


def _case_reductions(rng):
    x = _leaf(rng, 8)
    return lambda: T.reduce_sum(x) * 0.3 + T.reduce_mean(x * x) + T.std(x) * 2.0, {"x": x}, None


def _case_window_reductions(rng):
    x = _leaf(rng, 1, 1, 7, 6)
    fn = lambda: (_project(T.window_reduce(x, "mean", 3, 2), w1)  # noqa: E731
                  + _project(T.window_reduce(x, "std", 3, 2), w2)
                  + _project(T.window_reduce(x, "sum", 2, 1), w3))
    w1, w2, w3 = _proj_weights(rng, (1, 1, 3, 2)), _proj_weights(rng, (1, 1, 3, 2)), _proj_weights(rng, (1, 1, 6, 5))
    return fn, {"x": x}, None


def _case_shape_ops(rng):
    a, b = _leaf(rng, 1, 2, 2, 3), _leaf(rng, 1, 3, 2, 3)
    w = _proj_weights(rng, (3, 2, 5))
    fn = lambda: _project(T.concat_channels([a, b]).reshape(5, 2, 3).transpose(2, 1, 0), w)  # noqa: E731
    return fn, {"a": a, "b": b}, None


def _case_composite(rng):
    x = _leaf(rng, 2, 2, 5, 5)
    conv = Conv2d(2, 3, 3, rng)
    bn = BatchNorm2d(3)
    fn = lambda: T.reduce_mean(T.relu(bn(conv(x))) * T.relu(bn(conv(x))))  # noqa: E731
    return fn, {"x": x, "w": conv.weight, "bias": conv.bias, "gamma": bn.gamma}, 40


def _randomise_scalars(module, rng):
    for name, p in module.named_parameters():
        if name.endswith("alpha") or name.endswith("beta"):
            p.data[...] = rng.uniform(0.5, 1.5)


def _case_position_attention(rng):
    fh, fl = _leaf(rng, 1, 3, 2, 2), _leaf(rng, 1, 3, 4, 3)
    pa = PositionAttention(3, rng)
    _randomise_scalars(pa, rng)
    w = _proj_weights(rng, (1, 3, 2, 2))
    inputs = {"F_h": fh, "F_l": fl, "alpha": pa.alpha, "query": pa.query_conv.weight,
              "key": pa.key_conv.weight, "value": pa.value_conv.weight, "value_bias": pa.value_conv.bias}
    return lambda: _project(pa(fh, fl)[0], w), inputs, None


def _case_channel_attention(rng):
    fh, fl = _leaf(rng, 1, 3, 2, 2, low=-0.5, high=0.5), _leaf(rng, 1, 3, 4, 4, low=-0.5, high=0.5)
    ca = ChannelAttention()
    _randomise_scalars(ca, rng)
    w = _proj_weights(rng, (1, 3, 4, 4))
    return lambda: _project(ca(fh, fl)[0], w), {"F_h": fh, "F_l": fl, "beta": ca.beta}, None


def _case_cla(rng):
    fh, fl = _leaf(rng, 1, 2, 2, 2, low=-0.7, high=0.7), _leaf(rng, 1, 2, 4, 4, low=-0.7, high=0.7)
    cla = CrossLevelAttention(2, rng)
    _randomise_scalars(cla, rng)
    w1, w2 = _proj_weights(rng, (1, 2, 2, 2)), _proj_weights(rng, (1, 2, 4, 4))

    def fn():
        high, low, _ = cla(fh, fl)
        return _project(high, w1) + _project(low, w2)

    inputs = {"F_h": fh, "F_l": fl, "alpha": cla.position.alpha, "beta": cla.channel.beta}
    return fn, inputs, None


def _case_ffm(rng):
    c = 2
    low, high, prev = _leaf(rng, 2, c, 4, 4), _leaf(rng, 2, c, 1, 1), _leaf(rng, 2, c, 2, 2)
    ffm = FeatureFusion(c, rng)
    w = _proj_weights(rng, (2, c, 4, 4))
    inputs = {"F_l_out": low, "F_h_out": high, "D_prev": prev, "compress": ffm.compress.conv.weight,
              "gate": ffm.gate_conv.weight, "gate_bias": ffm.gate_conv.bias}
    return lambda: _project(ffm(low, high, prev), w), inputs, 24


def _case_head(rng):
    d = _leaf(rng, 1, 3, 3, 3)
    head = Head(3, rng)
    w = _proj_weights(rng, (1, 1, 6, 7))
    inputs = {"D": d, "weight": head.predict_conv.weight, "bias": head.predict_conv.bias}
    return lambda: _project(head(d, 6, 7), w), inputs, None


def _random_mask(rng, h, w):
    g = (rng.uniform(size=(h, w)) < 0.4).astype(float)
    g[0, 0] = 1.0
    return g


def _case_pixel_bce(rng):
    s = _leaf(rng, 8, 8, low=0.05, high=0.95)
    g = _random_mask(rng, 8, 8)
    return lambda: pixel_bce(s, g), {"S": s}, None


def _case_region(rng):
    s = _leaf(rng, 8, 8, low=0.05, high=0.95)
    g = _random_mask(rng, 8, 8)
    return lambda: region_ssd(s, g, RegionConfig(3, 2)), {"S": s}, None


def _case_object(rng):
    s = _leaf(rng, 8, 8, low=0.05, high=0.95)
    g = _random_mask(rng, 8, 8)
    return lambda: object_fmeasure_loss(s, g).loss, {"S": s}, None


def _case_multi_level(rng):
    maps = [_leaf(rng, 1, 1, 8, 8, low=0.05, high=0.95) for _ in range(4)]
    g = _random_mask(rng, 8, 8)[None, None]
    fn = lambda: multi_level_loss([(m, g) for m in maps], RegionConfig(4, 2)).loss  # noqa: E731
    return fn, {f"S_{i + 1}": m for i, m in enumerate(maps)}, 16


def _case_model(rng):
    from .model import ClassMini, ModelConfig

    model = ClassMini(ModelConfig(base_channels=4, input_size=32, init_seed=int(rng.integers(1 << 31))))
    for name, p in model.named_parameters():
        if name.endswith("alpha") or name.endswith("beta"):
            p.data[...] = rng.uniform(0.2, 0.6)
    x = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    g = _random_mask(rng, 32, 32)[None, None]
    cfg = RegionConfig.for_size(32)

    def fn():
        preds, _ = model(x)
        return multi_level_loss([(p, g) for p in preds], cfg).loss

    return fn, dict(model.named_parameters()), 5


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable
    group: str


SUITE: list[Case] = [
    Case("matmul", _case_matmul, "tensor"),
    Case("softmax_rows", _case_softmax, "tensor"),
    Case("conv2d_3x3", _case_conv3, "tensor"),
    Case("conv2d_3x3_stride2", _case_conv_strided, "tensor"),
    Case("conv2d_1x1", _case_conv1, "tensor"),
    Case("bilinear_resize", _case_resize, "tensor"),
    Case("batch_norm_train", _case_batch_norm, "tensor"),
    Case("batch_norm_eval", _case_batch_norm_eval, "tensor"),
    Case("relu", _case_relu, "tensor"),
    Case("sigmoid", _case_sigmoid, "tensor"),
    Case("reductions", _case_reductions, "tensor"),
    Case("window_reductions", _case_window_reductions, "tensor"),
    Case("shape_ops", _case_shape_ops, "tensor"),
    Case("conv_bn_relu_mean", _case_composite, "tensor"),
    Case("position_attention", _case_position_attention, "attention"),
    Case("channel_attention", _case_channel_attention, "attention"),
    Case("cla_forward", _case_cla, "attention"),
    Case("ffm_forward", _case_ffm, "decoder"),
    Case("head_forward", _case_head, "decoder"),
    Case("pixel_bce", _case_pixel_bce, "losses"),
    Case("region_ssd", _case_region, "losses"),
    Case("object_fmeasure", _case_object, "losses"),
    Case("multi_level_loss", _case_multi_level, "losses"),
    Case("class_mini_model", _case_model, "model"),
]


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    worst_input: str
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_case(case: Case, seed: int, instances: int) -> CaseResult:
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    skipped: dict[str, int] = {}
    for k in range(instances):
        rng = np.random.default_rng([seed, k, sum(map(ord, case.name))])
        fn, inputs, max_entries = case.build(rng)
        errors = check_gradients(fn, inputs, rng, max_entries, skipped=skipped)
        for name, err in errors.items():
            if not err <= worst:
                worst, worst_name = err, name
    return CaseResult(case.name, instances, worst, worst_name, time.perf_counter() - start,
                      sum(skipped.values()))


def run_suite(seed: int = 0, instances: int = 20, names=None) -> list[CaseResult]:
    cases = [c for c in SUITE if names is None or c.name in names]
    return [run_case(c, seed, instances) for c in cases]


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'case':<22} {'n':>3} {'max rel err':>12} {'kinks':>6} {'time':>8}  result  worst input"]
    for r in results:
        lines.append(f"{r.name:<22} {r.instances:>3} {r.max_error:>12.3e} {r.skipped:>6} {r.seconds:>7.2f}s  "
                     f"{'PASS' if r.passed else 'FAIL'}    {r.worst_input}")
    return "\n".join(lines)
