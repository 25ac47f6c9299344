"""Acceptance criteria, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the summary printed at the end of the
pytest run (see conftest.py) before asserting.
"""
import json
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from test_losses import blob_mask, path_losses
from test_metrics import f_scalar, mae_loops, pr_loops, random_pair, s_measure_reference

from classkit import gradcheck
from classkit import losses as L
from classkit import metrics as M
from classkit.attention import ChannelAttention, CrossLevelAttention, PositionAttention
from classkit.cli import ABLATION_COLUMNS, ABLATIONS, main
from classkit.data import render_sample
from classkit.model import ModelConfig, build
from classkit.tensor import Tensor
from classkit.train import TrainConfig, train_loop


def report(number: int, title: str, failures: list[str], detail: str) -> None:
    status = "PASS" if not failures else "FAIL"
    line = f"criterion {number} {title}: {status} ({detail})"
    if failures:
        line += " failures: " + "; ".join(failures[:5])
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failures, line


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=7, instances=20)
    elapsed = time.perf_counter() - start
    failures = [f"{r.name} err {r.max_error:.2e} at {r.worst_input}" for r in results if not r.passed]
    if elapsed > 300:
        failures.append(f"runtime {elapsed:.1f}s > 300s")
    if any(r.instances < 20 for r in results):
        failures.append("fewer than 20 instances")
    groups = {c.group for c in gradcheck.SUITE}
    if groups != {"tensor", "attention", "decoder", "losses", "model"}:
        failures.append(f"groups {sorted(groups)}")
    worst = max(r.max_error for r in results)
    report(1, "gradient suite", failures,
           f"{len(results)} cases x 20 instances, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_attention_identities():
    rng = np.random.default_rng(2024)
    failures = []
    for k in range(20):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 6))
        hh, wh = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        hl, wl = hh + int(rng.integers(0, 4)), wh + int(rng.integers(0, 4))
        fh = Tensor(rng.normal(size=(n, c, hh, wh)))
        fl = Tensor(rng.normal(size=(n, c, hl, wl)))
        cla = CrossLevelAttention(c, rng)
        hi, lo, _ = cla(fh, fl)
        if hi.data.tobytes() != fh.data.tobytes() or lo.data.tobytes() != fl.data.tobytes():
            failures.append(f"shape {k}: zero-gain identity")

        cla.position.alpha.data[...] = rng.normal()
        cla.channel.beta.data[...] = rng.normal()
        _, _, maps = cla(fh, fl)
        for name, m in (("position", maps.position_map.data), ("channel", maps.channel_map.data)):
            if np.abs(m.sum(-1) - 1).max() > 1e-9 or m.min() < 0:
                failures.append(f"shape {k}: {name} map not row-stochastic")

        pos: PositionAttention = cla.position
        out, smap = pos(fh, fl)
        flat = fl.data.reshape(n, c, -1)
        perm = rng.permutation(flat.shape[-1])
        out2, smap2 = pos(fh, Tensor(flat[:, :, perm].reshape(n, c, 1, -1)))
        if out2.data.tobytes() != out.data.tobytes() or not np.array_equal(smap2.data, smap.data[:, :, perm]):
            failures.append(f"shape {k}: position permutation")

        chan: ChannelAttention = cla.channel
        out, zmap = chan(fh, fl)
        cperm = rng.permutation(c)
        out2, zmap2 = chan(Tensor(fh.data[:, cperm]), fl)
        if out2.data.tobytes() != out.data.tobytes() or not np.array_equal(zmap2.data, zmap.data[:, :, cperm]):
            failures.append(f"shape {k}: channel permutation")
    report(2, "attention identities", failures, "20 random shapes")


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(3)
    failures = []
    cfg = L.RegionConfig.for_size(16)
    for _ in range(10):
        s = rng.random((16, 16))
        if abs(L.region_ssd(Tensor(s), s, cfg).item()) > 1e-12:
            failures.append("region(S, S) != 0")
    g = np.zeros((16, 16))
    g[3:13, 4:14] = 1.0
    exact = L.object_fmeasure_loss(Tensor(g), g).loss.item()
    if not exact <= 1e-8:
        failures.append(f"object(S=G, n1=100) = {exact:.3e}")
    miss = L.object_fmeasure_loss(Tensor(1 - g), g).loss.item()
    if abs(miss - 1.0) > 1e-9:
        failures.append(f"complete miss = {miss}")
    for _ in range(10):
        s = rng.uniform(0.01, 0.99, (16, 16))
        bd = L.combined_loss(Tensor(s), g, cfg)
        if bd.total != bd.pixel + bd.region + bd.object:
            failures.append("total is not the exact sum")
    half = Tensor(np.full((4, 4), 0.5))
    bd = L.multi_level_loss([(half, g[:4, :4])] * 4, terms=("pixel",))
    if bd.final != pytest.approx(1.875 * np.log(2), rel=1e-15) or \
            L.recompute_final([(i, 1.0, w) for i, _, w in bd.per_level]) != 1.875:
        failures.append("1.875 case")
    maps = [Tensor(rng.uniform(0.1, 0.9, (16, 16)), requires_grad=True) for _ in range(4)]
    base = maps[0].data
    for m in maps:
        m.data[...] = base
    L.multi_level_loss([(m, g) for m in maps], cfg).loss.backward()
    for a, b in zip(maps, maps[1:]):
        if not np.allclose(a.grad, 2 * b.grad, rtol=1e-12, atol=0):
            failures.append("gradient ratio is not 2:1")
    report(3, "loss identities", failures, f"object(S=G) {exact:.2e}, miss {miss}")


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    failures = []
    for k in range(50):
        s, g = random_pair(rng)
        if abs(M.mae(s, g) - mae_loops(s, g)) > 1e-12:
            failures.append(f"pair {k}: mae")
        curve = M.pr_curve(s, g)
        p, r = pr_loops(s, g)
        if np.abs(curve.precision - p).max() > 1e-12 or np.abs(curve.recall - r).max() > 1e-12:
            failures.append(f"pair {k}: PR points")
        f = M.f_measure(curve.precision, curve.recall)
        if np.abs(f - np.array([f_scalar(a, b) for a, b in zip(p, r)])).max() > 1e-12:
            failures.append(f"pair {k}: F_beta")
        if abs(M.s_measure(s, g)[0] - s_measure_reference(s, g)) > 1e-9:
            failures.append(f"pair {k}: S-measure")
    z = np.zeros((8, 8))
    edge = [(M.s_measure(z, z)[0], 1.0), (M.s_measure(np.ones((8, 8)), z)[0], 0.0),
            (M.s_measure(np.full((8, 8), 0.25), z)[0], 0.75),
            (M.s_measure(np.full((8, 8), 0.25), np.ones((8, 8)))[0], 0.25)]
    failures += [f"edge case {got} != {want}" for got, want in edge if got != want]
    worst = 1.0
    for _ in range(20):
        g = np.zeros((16, 16))
        r0, c0 = rng.integers(0, 10, 2)
        g[r0:r0 + rng.integers(2, 7), c0:c0 + rng.integers(2, 7)] = 1.0
        worst = min(worst, M.s_measure(g, g)[0])
    if worst < 0.99:
        failures.append(f"S(G, G) = {worst}")
    report(4, "metric oracles", failures, f"50 random pairs, min S(G,G) {worst:.4f}")


def test_criterion_5_desk_training(tmp_path):
    train_set = [render_sample(0, i, 64) for i in range(200)]
    val_set = [render_sample(1000, i, 64) for i in range(50)]
    cfg = TrainConfig(epochs=30, batch_size=8, seed=0)
    runs = []
    for name in ("a", "b"):
        start = time.perf_counter()
        _, log = train_loop(build(ModelConfig(base_channels=16, input_size=64)), train_set, val_set, cfg,
                            out_dir=tmp_path / name)
        runs.append((log, time.perf_counter() - start))
    log, seconds = runs[0]
    ratio = log.epoch_loss[-1] / log.epoch_loss[0]
    val = log.validation[-1]
    failures = []
    if ratio > 0.3:
        failures.append(f"loss ratio {ratio:.3f}")
    if val.f_max < 0.80:
        failures.append(f"f_max {val.f_max:.4f}")
    if val.mae > 0.08:
        failures.append(f"mae {val.mae:.4f}")
    if max(t for _, t in runs) > 1200:
        failures.append("over 20 minutes")
    if (tmp_path / "a/latest.clsk").read_bytes() != (tmp_path / "b/latest.clsk").read_bytes():
        failures.append("checkpoints differ")
    report(5, "desk training", failures,
           f"L_Final {log.epoch_loss[0]:.4f} -> {log.epoch_loss[-1]:.4f} (ratio {ratio:.3f}), "
           f"val f_max {val.f_max:.4f}, mae {val.mae:.4f}, {seconds:.0f}s/run single core, checkpoints identical")


def test_criterion_6_ablation_harness(tmp_path):
    # reduced sample and epoch counts: the binding criterion is determinism and schema validity
    argv = ["ablate", "--train-count", "24", "--val-count", "8", "--epochs", "2"]
    failures = []
    for name in ("a", "b"):
        if main(argv + ["--out", str(tmp_path / name)]) != 0:
            failures.append(f"run {name} exited non-zero")
    for name in ("ablation.csv", "ablation.json"):
        if (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes():
            failures.append(f"{name} differs between runs")
    doc = json.loads((tmp_path / "a/ablation.json").read_text())
    if doc.get("format") != "classkit-ablation v1" or doc.get("columns") != ABLATION_COLUMNS:
        failures.append("header")
    rows = doc.get("rows", [])
    if [r["id"] for r in rows] != [a[0] for a in ABLATIONS] or len(rows) != 10:
        failures.append("not ten configurations")
    for r in rows:
        if set(r) != set(ABLATION_COLUMNS) or not all(np.isfinite(r[k]) for k in ("f_max", "s_measure", "mae")):
            failures.append(f"row {r.get('id')} malformed")
    csv_lines = (tmp_path / "a/ablation.csv").read_text().splitlines()
    if csv_lines[0].split(",") != ABLATION_COLUMNS or len(csv_lines) != 11:
        failures.append("csv layout")
    held = sum(d["holds"] for d in doc["directions"])
    report(6, "ablation harness", failures,
           f"10 configurations, byte-identical reruns, directions holding {held}/{len(doc['directions'])}")


def test_criterion_7_monotone_path():
    rng = np.random.default_rng(7)
    failures = []
    for side in (16, 64):
        cfg = L.RegionConfig.for_size(side)
        for k in range(10):
            g = blob_mask(rng, side)
            for name, values in path_losses(g, cfg).items():
                if not np.all(np.diff(values) < 0):
                    failures.append(f"{side}px mask {k}: {name}")
    report(7, "monotone path", failures, "10 random shape masks at 16 and 64 px, 11-point path, three losses")
