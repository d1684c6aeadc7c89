"""End-to-end acceptance gate.

Each test covers one sign-off criterion (A1-A11) and emits a single
"[A#] PASS/FAIL" line; conftest echoes the lines after the run so the
verdicts survive output capture.
"""

import dataclasses
import itertools
import json
import os
import shutil

import numpy as np
import torch

from conftest import ACCEPTANCE_LINES
from splitbd import pipeline
from splitbd.attack.cluster import (
    AnchorEmbedding,
    ClusterModel,
    kmeans_cluster,
    select_target_anchor,
)
from splitbd.attack.inject import inject_backdoor
from splitbd.attack.trigger import TriggerStats, select_trigger_embedding, trigger_from_json
from splitbd.config import derive_seed
from splitbd.data import ImageBatch, load_dataset
from splitbd.metrics import clean_accuracy, epoch_window_mean, stealth_equivalence
from splitbd.nn import layers
from splitbd.nn.core import load_params
from splitbd.protocol import MessageLog, load_recorder


def criterion(tag, ok, detail):
    line = f"[{tag}] {'PASS' if ok else 'FAIL'} — {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# A1-A3: the attacked desk-scale run itself


def test_a1_attack_hits_desk_targets(desk_run):
    r = desk_run.report
    drop = r.baseline_acc - r.acc_window_mean
    ok = drop <= 3.0 and r.asr_window_mean >= 70.0 and desk_run.minutes <= 20.0
    criterion("A1", ok,
              f"clean {r.acc_window_mean:.2f}% (baseline {r.baseline_acc:.2f}%, "
              f"drop {drop:.2f} <= 3.0), ASR {r.asr_window_mean:.2f}% >= 70, "
              f"runtime {desk_run.minutes:.1f} min <= 20")


def test_a2_session_logs_are_byte_identical(desk_run):
    honest = MessageLog.load(os.path.join(desk_run.out, "msglog_honest.bin"))
    malicious = MessageLog.load(os.path.join(desk_run.out, "msglog_malicious.bin"))
    verdict = stealth_equivalence(honest, malicious)
    ok = desk_run.report.stealth_ok is True and verdict.ok and verdict.frame_index == -1
    detail = ("honest and malicious session logs byte-identical" if ok
              else f"logs differ: {verdict.detail}")
    criterion("A2", ok, detail)


def test_a3_surrogate_tracks_the_client(desk_run):
    r = desk_run.report
    rel_drop = 100.0 * (r.kl_initial - r.kl_final) / r.kl_initial
    ok = r.kl_final <= 0.5 * r.kl_initial and r.surrogate_composed_acc > 30.0
    criterion("A3", ok,
              f"KL {r.kl_initial:.4f} -> {r.kl_final:.4f} ({rel_drop:.1f}% drop, need >= 50%), "
              f"composed accuracy {r.surrogate_composed_acc:.2f}% > 30%")


# ---------------------------------------------------------------------------
# A4: trigger selection against an independent sort oracle


def test_a4_trigger_selection_matches_sort_oracle():
    rng = np.random.default_rng(41)
    checked = 0
    for case in range(1000):
        dim = int(rng.integers(4, 4097))
        if case % 2:
            vec = rng.normal(size=dim)
        else:
            vec = rng.integers(0, 8, size=dim).astype(np.float64) / 4.0  # heavy ties
        stats = TriggerStats(impact=vec, triggered_mean=rng.normal(size=dim))
        order = np.lexsort((np.arange(dim), -vec))
        for k in sorted({1, dim // 2, dim}):
            got = select_trigger_embedding(stats, k).indices.tolist()
            want = sorted(order[:k].tolist())
            assert got == want, f"case {case}: k={k} dim={dim}"
            if dim <= 64:  # second, slower oracle on the small cases
                slow = sorted(sorted(range(dim), key=lambda i: (-vec[i], i))[:k])
                assert got == slow, f"case {case}: k={k} dim={dim}"
            checked += 1
    criterion("A4", True,
              f"{checked} selections over 1000 random impact vectors match the sort oracle")


# ---------------------------------------------------------------------------
# A5: k-means against exhaustive small-instance optima


def exhaustive_inertia(points, k):
    """Global k-means optimum by trying every assignment (tiny n only)."""
    best = np.inf
    for assign in itertools.product(range(k), repeat=len(points)):
        a = np.asarray(assign)
        total = 0.0
        for c in range(k):
            grp = points[a == c]
            if len(grp):
                total += float(((grp - grp.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


def test_a5_kmeans_reaches_small_instance_optima():
    worst_gap = 0.0
    for seed in range(100):
        rng = np.random.default_rng(500 + seed)
        n = int(rng.integers(4, 9))
        d = 1 + seed % 2
        k = int(rng.integers(2, 4))
        pts = rng.normal(size=(n, d))
        # 16 restarts leave a couple of instances at local minima; 32 reach
        # the exhaustive optimum on every seed here
        km = kmeans_cluster(pts, k, seed=seed, n_init=32)
        best = exhaustive_inertia(pts, k)
        assert km.inertia <= best * (1 + 1e-9) + 1e-12, \
            f"seed {seed} (n={n} d={d} k={k}): {km.inertia} vs optimum {best}"
        assert km.inertia >= best * (1 - 1e-9) - 1e-12, \
            f"seed {seed}: inertia below the exhaustive optimum, oracle bug"
        worst_gap = max(worst_gap, abs(km.inertia - best) / max(best, 1e-12))
    for i in range(10):
        pts = np.random.default_rng(900 + i).normal(size=(200, 5))
        km = kmeans_cluster(pts, 10, seed=i, n_init=1)
        hist = np.asarray(km.inertia_history)
        assert (np.diff(hist) <= 1e-9).all(), f"problem {i}: objective rose, {hist}"
    criterion("A5", True,
              f"exhaustive optimum matched on 100 small instances (worst rel gap "
              f"{worst_gap:.1e}); objective non-increasing on 10 ten-cluster problems")


# ---------------------------------------------------------------------------
# A6: anchor choice on well-separated synthetic blobs


class _PassThrough:
    """Identity embedder: anchor selection sees the raw points."""

    def infer(self, x):
        t = x if torch.is_tensor(x) else torch.from_numpy(np.asarray(x))
        return t.reshape(len(t), -1)


def test_a6_anchor_lands_on_the_target_blob():
    net = _PassThrough()
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(6000 + trial)
        centers = 100.0 * np.eye(10)  # pairwise distance ~141, blob radius <= sqrt(10)
        pts = np.concatenate(
            [centers[i] + rng.uniform(-1.0, 1.0, (30, 10)) for i in range(10)])
        km = kmeans_cluster(pts, 10, seed=trial)
        t = trial % 10
        batch = ImageBatch(
            pts[30 * t: 30 * (t + 1)].reshape(30, 1, 1, 10).astype(np.float32),
            np.full(30, t, dtype=np.int64),
        )
        anchor = select_target_anchor(km, net, net, batch)
        want = int(np.linalg.norm(km.centroids - centers[t], axis=1).argmin())
        assert np.linalg.norm(km.centroids[want] - centers[t]) < 1.0, \
            f"trial {trial}: clustering missed the blob layout"
        if anchor.cluster_id == want and np.array_equal(anchor.vector, km.centroids[want]):
            hits += 1
    equidistant = select_target_anchor(
        ClusterModel(centroids=np.array([[-3.0, 0.0], [3.0, 0.0]]),
                     assignments=np.zeros(2, dtype=np.int64),
                     inertia=0.0, inertia_history=[0.0]),
        net, net,
        ImageBatch(np.zeros((1, 1, 1, 2), dtype=np.float32), np.zeros(1, dtype=np.int64)),
    )
    assert equidistant.distances[0] == equidistant.distances[1]
    criterion("A6", hits == 100 and equidistant.cluster_id == 0,
              f"anchor matched the generating blob {hits}/100; "
              f"equidistant tie resolved to the lowest cluster id")


# ---------------------------------------------------------------------------
# A7: analytic gradients of every layer type vs central differences


def central_diff_check(module, x, gen, eps=1e-6):
    """Worst relative error between autograd and central differences."""
    x = x.clone().requires_grad_(True)
    y = module(x)
    w = torch.randn(y.shape, dtype=torch.float64, generator=gen)
    loss = (y * w).sum()
    params = list(module.parameters())
    grads = torch.autograd.grad(loss, [x] + params)
    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip([x] + params, grads):
            flat = leaf.reshape(-1)  # view: in-place edits perturb the leaf
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float((module(x) * w).sum())
                flat[i] = orig - eps
                lo = float((module(x) * w).sum())
                flat[i] = orig
                fd[i] = (hi - lo) / (2.0 * eps)
            gf = g.reshape(-1)
            denom = max(float(gf.norm()), float(fd.norm()), 1e-12)
            worst = max(worst, float((gf - fd).norm()) / denom)
    return worst


def spec_catalog():
    return {obj for obj in vars(layers).values()
            if isinstance(obj, type) and dataclasses.is_dataclass(obj)}


def test_a7_layer_gradients_match_finite_differences():
    cases = [
        (layers.Conv(2, 3), (2, 2, 5, 5)),
        (layers.BatchNorm(3), (4, 3, 4, 4)),
        (layers.ReLU(), (2, 3, 4, 4)),
        (layers.LeakyReLU(0.2), (2, 3, 4, 4)),
        (layers.MaxPool(2), (2, 2, 4, 4)),
        (layers.GlobalAvgPool(), (2, 3, 5, 5)),
        (layers.Flatten(), (2, 2, 3, 3)),
        (layers.Linear(7, 4), (3, 7)),
        (layers.Sigmoid(), (2, 5)),
        (layers.Residual(2), (2, 2, 4, 4)),
        (layers.Bottleneck(2, 2, 4, stride=2), (2, 2, 4, 4)),
    ]
    assert {type(s) for s, _ in cases} == spec_catalog(), "layer vocabulary drifted"
    worst = 0.0
    for li, (spec, shape) in enumerate(cases):
        for trial in range(50):
            torch.manual_seed(10_000 * li + trial)
            module = layers.to_module(spec).double().train()
            gen = torch.Generator().manual_seed(20_000 * li + trial)
            x = torch.randn(shape, dtype=torch.float64, generator=gen)
            rel = central_diff_check(module, x, gen)
            worst = max(worst, rel)
            assert rel <= 1e-4, f"{type(spec).__name__} trial {trial}: rel err {rel:.3e}"
    criterion("A7", True,
              f"{len(cases)} layer types x 50 tensors: autograd within 1e-4 of "
              f"central differences (worst {worst:.1e})")


# ---------------------------------------------------------------------------
# A8: zero backdoor weight leaves clean accuracy alone


def test_a8_fidelity_only_injection_keeps_clean_accuracy(desk_run):
    cfg = desk_run.cfg
    data = load_dataset(cfg.dataset, cfg.data_root,
                        aux_count=cfg.aux_count if cfg.aux_count > 0 else None,
                        aux_fraction=cfg.aux_fraction, seed=derive_seed(cfg.seed, "data"))
    model = pipeline.load_trained_model(cfg, desk_run.out)
    recorder = load_recorder(os.path.join(desk_run.out, "recorder.bin"))
    trig = trigger_from_json(open(os.path.join(desk_run.out, "trigger.json")).read())
    anc = json.loads(open(os.path.join(desk_run.out, "anchor.json")).read())
    anchor = AnchorEmbedding(vector=np.asarray(anc["vector"], dtype=np.float64),
                             cluster_id=int(anc["cluster_id"]),
                             distances=np.asarray(anc["distances"], dtype=np.float64))
    icfg = dataclasses.replace(cfg.injection_config(), lambda_bd=0.0)
    _, snapshots, _ = inject_backdoor(model.server, recorder, trig, anchor, icfg)
    lo, hi = icfg.window
    accs = {}
    for epoch in range(lo, hi + 1):
        server_e = model.server.clone()
        load_params(server_e, snapshots[epoch])
        accs[epoch] = clean_accuracy(dataclasses.replace(model, server=server_e), data.test)
    acc = epoch_window_mean(accs, (lo, hi))
    delta = abs(acc - desk_run.report.baseline_acc)
    criterion("A8", delta <= 0.5,
              f"zero-weight payload: clean {acc:.2f}% vs pre-injection "
              f"{desk_run.report.baseline_acc:.2f}% (|delta| {delta:.2f} <= 0.5)")


# ---------------------------------------------------------------------------
# A9: trigger-width sweep


def test_a9_width_sweep_completes(desk_run):
    widths = list(range(10, 101, 10))
    rows = pipeline.run_sweep(desk_run.cfg, desk_run.out, widths)
    assert [row[0] for row in rows] == widths
    lines = open(os.path.join(desk_run.out, "sweep.csv")).read().splitlines()
    assert len(lines) == 1 + len(widths)
    r = desk_run.report
    k50 = rows[4]
    assert k50[0] == 50
    # same width as the default run, so the sweep must reproduce it exactly
    assert k50[1] == r.acc_window_mean and k50[2] == r.asr_window_mean
    drop = r.baseline_acc - k50[1]
    ok = drop <= 3.0 and k50[2] >= 70.0
    criterion("A9", ok,
              f"sweep k=10..100 emitted {len(rows)} rows; k=50: clean drop "
              f"{drop:.2f} <= 3.0, ASR {k50[2]:.2f}% >= 70")


# ---------------------------------------------------------------------------
# A10: additive-noise defense


def test_a10_noise_defense_trades_accuracy(desk_run, tmp_path):
    out = str(tmp_path / "defense")
    os.makedirs(out)
    shutil.copytree(desk_run.out, os.path.join(out, "clean"))  # reuse as reference
    cfg = dataclasses.replace(desk_run.cfg, sigma=0.05)
    summary = pipeline.run_defense(cfg, out)
    assert summary["baseline_acc_clean"] == desk_run.report.baseline_acc
    assert "asr_window_noise" in summary and "asr_window_clean" in summary
    ok = summary["baseline_acc_noise"] < summary["baseline_acc_clean"]
    criterion("A10", ok,
              f"sigma=0.05: clean baseline {summary['baseline_acc_clean']:.2f}% -> "
              f"{summary['baseline_acc_noise']:.2f}% (strictly lower), "
              f"ASR {summary['asr_window_clean']:.2f}% -> {summary['asr_window_noise']:.2f}%")


# ---------------------------------------------------------------------------
# A11: transport choice leaves no trace in the metrics


def test_a11_transport_choice_is_invisible_in_metrics(tiny_run, tmp_path):
    cfg = dataclasses.replace(
        tiny_run.cfg,
        session=dataclasses.replace(tiny_run.cfg.session, transport="tcp"))
    out = str(tmp_path / "tcp")
    report = pipeline.run_all(cfg, out)
    assert report == tiny_run.report
    same = (open(os.path.join(out, "metrics.jsonl"), "rb").read()
            == open(os.path.join(tiny_run.out, "metrics.jsonl"), "rb").read())
    criterion("A11", same,
              "same seeded experiment over in-process and TCP transports: "
              "metrics byte-identical")
