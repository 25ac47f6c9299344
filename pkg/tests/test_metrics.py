import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from classkit import metrics as M
from classkit.errors import ContractError, DimensionError

EPS = 1e-7
SSIM_EPS = 2.0 ** -52


def random_pair(rng, side=16):
    s = rng.random((side, side))
    g = (rng.random((side, side)) < rng.uniform(0.1, 0.9)).astype(float)
    return s, g


# -- brute-force references ---------------------------------------------------

def mae_loops(s, g):
    total = 0.0
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            total += abs(s[i, j] - g[i, j])
    return total / s.size


def pr_loops(s, g):
    q = [[math.floor(v * 255 + 0.5) for v in row] for row in s]
    precision, recall = [], []
    for t in range(256):
        tp = fp = fn = 0
        for i in range(len(q)):
            for j in range(len(q[0])):
                pred, truth = q[i][j] >= t, g[i][j] > 0.5
                tp += pred and truth
                fp += pred and not truth
                fn += (not pred) and truth
        precision.append(tp / (tp + fp + EPS))
        recall.append(tp / (tp + fn + EPS))
    return np.array(precision), np.array(recall)


def f_scalar(p, r, b2=0.3):
    return (1 + b2) * p * r / (b2 * p + r + EPS)


def s_measure_reference(s, g):
    """Definition-level S-measure written with explicit loops."""
    g = g > 0.5
    h, w = g.shape
    fg_share = g.sum() / g.size
    if fg_share == 0:
        return 1 - s.mean()
    if fg_share == 1:
        return s.mean()

    def o_score(values):
        n = len(values)
        mean = sum(values) / n
        sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
        return 2 * mean / (mean ** 2 + 1 + sd + EPS)

    fg = [s[i, j] for i in range(h) for j in range(w) if g[i, j]]
    bg = [1 - s[i, j] for i in range(h) for j in range(w) if not g[i, j]]
    so = fg_share * o_score(fg) + (1 - fg_share) * o_score(bg)

    ys = [i for i in range(h) for j in range(w) if g[i, j]]
    xs = [j for i in range(h) for j in range(w) if g[i, j]]
    cx, cy = math.floor(sum(xs) / len(xs) + 0.5) + 1, math.floor(sum(ys) / len(ys) + 0.5) + 1

    def ssim(rows, cols):
        a = [s[i, j] for i in rows for j in cols]
        b = [float(g[i, j]) for i in rows for j in cols]
        n = len(a)
        ma, mb = sum(a) / n, sum(b) / n
        d = max(n - 1, 1)
        va = sum((x - ma) ** 2 for x in a) / d
        vb = sum((x - mb) ** 2 for x in b) / d
        cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / d
        num = 4 * ma * mb * cov
        den = (ma ** 2 + mb ** 2) * (va + vb)
        if num != 0:
            return num / (den + SSIM_EPS)
        return 1.0 if den == 0 else 0.0

    sr = 0.0
    for rows in (range(0, cy), range(cy, h)):
        for cols in (range(0, cx), range(cx, w)):
            if len(rows) and len(cols):
                sr += len(rows) * len(cols) / (h * w) * ssim(rows, cols)
    return min(max(0.5 * sr + 0.5 * so, 0.0), 1.0)


# -- examples ------------------------------------------------------------------

def test_mae_examples():
    g = (np.random.default_rng(0).random((8, 8)) < 0.5).astype(float)
    assert M.mae(g, g) == 0.0
    assert M.mae(np.full((8, 8), 0.5), g) == 0.5
    with pytest.raises(DimensionError):
        M.mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pr_examples():
    g = np.zeros((8, 8))
    g[2:6, 1:5] = 1.0
    curve = M.pr_curve((g * 255).astype(np.uint8), g)
    np.testing.assert_allclose(curve.precision[1:], 1.0, atol=1e-7)
    np.testing.assert_allclose(curve.recall[1:], 1.0, atol=1e-7)
    empty = M.pr_curve(np.zeros((8, 8)), g)
    np.testing.assert_array_equal(empty.recall[1:], 0.0)
    np.testing.assert_array_equal(curve.thresholds, np.arange(256))


def test_quantization_rounds_half_up():
    np.testing.assert_array_equal(M.quantize([0.0, 0.5, 1.0, 2 / 510, 1.2, -0.1]), [0, 128, 255, 1, 255, 0])


def test_f_measure_examples():
    assert M.f_measure(0.75, 0.75) == pytest.approx(0.75, rel=1e-6)
    assert M.f_measure(1.0, 0.5) == pytest.approx(1.3 * 0.5 / 0.8, rel=1e-6)
    assert M.f_measure(1.0, 0.5) == pytest.approx(0.8125, abs=1e-6)
    assert M.f_measure(0.0, 0.0) == 0.0


def test_s_measure_edge_cases():
    z = np.zeros((8, 8))
    assert M.s_measure(z, z) == (1.0, 1.0, 1.0)
    assert M.s_measure(np.ones((8, 8)), z)[0] == 0.0
    assert M.s_measure(np.full((8, 8), 0.25), np.ones((8, 8)))[0] == 0.25
    assert M.s_measure(np.full((8, 8), 0.25), z)[0] == 0.75


def test_s_measure_perfect_prediction():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = np.zeros((16, 16))
        r0, c0 = rng.integers(0, 10, 2)
        g[r0:r0 + rng.integers(2, 7), c0:c0 + rng.integers(2, 7)] = 1.0
        assert M.s_measure(g, g)[0] >= 0.99


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.integers(2, 24), st.integers(2, 24), st.floats(0.0, 1.0))
def test_perfect_prediction_scores_one_for_any_mask(seed, h, w, share):
    rng = np.random.default_rng(seed)
    g = (rng.random((h, w)) < share).astype(float)
    g.flat[rng.integers(g.size)] = 1.0  # nondegenerate: at least one pixel of each kind
    g.flat[rng.integers(g.size)] = 0.0
    if g.all() or not g.any():
        return
    assert M.s_measure(g, g)[0] >= 0.99


def test_centroid_rounds_half_up():
    g = np.zeros((16, 16))
    g[0:4, 8:10] = 1.0  # centroid (x 8.5, y 1.5)
    assert M._centroid(g) == (10, 3)
    assert M.s_measure(g, g)[0] >= 0.99


# -- oracle equivalence --------------------------------------------------------

def test_oracles_on_fifty_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s, g = random_pair(rng)
        assert M.mae(s, g) == pytest.approx(mae_loops(s, g), abs=1e-12)
        curve = M.pr_curve(s, g)
        p, r = pr_loops(s, g)
        np.testing.assert_allclose(curve.precision, p, atol=1e-12, rtol=0)
        np.testing.assert_allclose(curve.recall, r, atol=1e-12, rtol=0)
        f = M.f_measure(curve.precision, curve.recall)
        np.testing.assert_allclose(f, [f_scalar(a, b) for a, b in zip(p, r)], atol=1e-12, rtol=0)
        assert M.s_measure(s, g)[0] == pytest.approx(s_measure_reference(s, g), abs=1e-9)


def test_adaptive_threshold_matches_loops():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s, g = random_pair(rng)
        q = np.floor(s * 255 + 0.5)
        t = min(2 * q.mean(), 255)
        pred = q >= t
        tp = np.sum(pred & (g > 0.5))
        expect = f_scalar(tp / (pred.sum() + EPS), tp / ((g > 0.5).sum() + EPS))
        assert M.adaptive_f(s, g) == pytest.approx(expect, abs=1e-12)


# -- properties ----------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_ranges_and_complement_symmetry(seed):
    rng = np.random.default_rng(seed)
    s, g = random_pair(rng, 12)
    img = M.evaluate_image(s, g)
    for value in (img.f_max, img.f_mean, img.f_adaptive, img.mae, img.s_measure, img.s_object):
        assert 0.0 <= value <= 1.0
    assert img.f_max >= img.f_mean >= 0.0
    assert img.f_max >= img.f_adaptive
    assert np.all(np.diff(img.curve.recall) <= 0)
    # exact: rng.random() draws lie on the 2**-53 grid, where 1 - s is exact
    assert M.mae(s, g) == M.mae(1 - s, 1 - g)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_pixel_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s, g = random_pair(rng, 10)
    perm = rng.permutation(100)
    s2, g2 = s.ravel()[perm].reshape(10, 10), g.ravel()[perm].reshape(10, 10)
    assert M.mae(s, g) == pytest.approx(M.mae(s2, g2), abs=1e-15)
    a, b = M.pr_curve(s, g), M.pr_curve(s2, g2)
    np.testing.assert_array_equal(a.precision, b.precision)
    np.testing.assert_array_equal(a.recall, b.recall)
    assert M.adaptive_f(s, g) == M.adaptive_f(s2, g2)


# -- dataset aggregation -------------------------------------------------------

def test_dataset_single_and_duplicate():
    rng = np.random.default_rng(4)
    s, g = random_pair(rng)
    one = M.evaluate_dataset([(s, g)])
    img = M.evaluate_image(s, g)
    assert one.summary() == {"f_max": img.f_max, "f_mean": img.f_mean, "f_adaptive": img.f_adaptive,
                             "mae": img.mae, "s_measure": img.s_measure, "s_region": img.s_region,
                             "s_object": img.s_object}
    two = M.evaluate_dataset([("a", s, g), ("b", s, g)])
    assert two.summary() == one.summary()


def test_dataset_is_hand_average():
    rng = np.random.default_rng(5)
    (s1, g1), (s2, g2) = random_pair(rng), random_pair(rng)
    rep = M.evaluate_dataset([("x", s1, g1), ("y", s2, g2)])
    a, b = M.evaluate_image(s1, g1), M.evaluate_image(s2, g2)
    for key in ("mae", "s_measure", "s_region", "s_object", "f_adaptive"):
        attr = key
        assert getattr(rep, attr) == pytest.approx((getattr(a, attr) + getattr(b, attr)) / 2, abs=1e-12)
    p = (a.curve.precision + b.curve.precision) / 2
    r = (a.curve.recall + b.curve.recall) / 2
    np.testing.assert_allclose(rep.curve.precision, p, atol=1e-12)
    f = np.array([f_scalar(x, y) for x, y in zip(p, r)])
    assert rep.f_max == pytest.approx(f.max(), abs=1e-12)
    assert rep.f_mean == pytest.approx(f.mean(), abs=1e-12)


def test_dataset_order_independent_and_errors():
    rng = np.random.default_rng(6)
    items = [(f"id{k}", *random_pair(rng)) for k in range(5)]
    a = M.evaluate_dataset(items)
    b = M.evaluate_dataset(items[::-1])
    assert a.summary() == b.summary()
    with pytest.raises(ContractError):
        M.evaluate_dataset([])
    with pytest.raises(DimensionError, match="bad"):
        M.evaluate_dataset([("ok", *random_pair(rng)), ("bad", np.zeros((4, 4)), np.zeros((4, 5)))])


def test_dataset_f_max_can_trail_mean_adaptive():
    # the dataset curve is built from averaged P/R, so its peak is not bounded
    # below by the mean of per-image adaptive scores
    # image a separates at thresholds 14..242, image b only at 1..5
    g1 = np.zeros((16, 16))
    g1[:4] = 1.0
    s1 = g1 * 0.9 + 0.05
    g2 = np.zeros((16, 16))
    g2[:, :3] = 1.0
    s2 = g2 * 0.02
    rep = M.evaluate_dataset([("a", s1, g1), ("b", s2, g2)])
    assert rep.f_max < rep.f_adaptive
    for im in rep.images:
        assert im.f_max >= im.f_adaptive


def test_csv_outputs(tmp_path):
    rng = np.random.default_rng(7)
    rep = M.evaluate_dataset([("a", *random_pair(rng)), ("b", *random_pair(rng))])
    M.write_metrics_csv(tmp_path / "m.csv", rep)
    M.write_pr_csv(tmp_path / "pr.csv", rep.curve)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "id,f_max,f_mean,f_adaptive,mae,s,s_r,s_o"
    assert [r.split(",")[0] for r in rows[1:]] == ["a", "b", "__summary__"]
    assert float(rows[-1].split(",")[1]) == rep.f_max
    pr = (tmp_path / "pr.csv").read_text().splitlines()
    assert len(pr) == 257 and pr[0] == "threshold,precision,recall"
