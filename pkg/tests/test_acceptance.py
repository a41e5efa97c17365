"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (visible even under pytest capture).

Run with `pytest tests/test_acceptance.py -v` (add -s for live output).
"""

import functools
import json
import math
import sys
import time

import numpy as np

import ctxood as cx
from ctxood import PerturbKind
from ctxood.core import STREAM_GENERATOR
from ctxood.cli import cli


def _announce(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"[ACCEPTANCE] {name}: FAIL", file=sys.__stdout__, flush=True)
                raise
            print(f"[ACCEPTANCE] {name}: PASS", file=sys.__stdout__, flush=True)
            return result

        return wrapper

    return deco


# --------------------------------------------------------------------------
# gradient correctness
# --------------------------------------------------------------------------


def _random_instance(rng):
    c = int(rng.integers(1, 6))
    m = int(rng.integers(1, 5))
    d_w = int(rng.integers(4, 17))
    d = int(rng.integers(3, min(d_w, 9) + 1))
    n_s = int(rng.integers(1, 4))
    tau = float(rng.uniform(0.5, 2.0))
    enc = cx.build_mean_pool_linear(d_w, d, rng)
    vp = rng.standard_normal((c, m, d_w))
    vs = rng.standard_normal((c, n_s, m, d_w))
    cls = 0.5 * rng.standard_normal((c, d_w))
    n = int(rng.integers(1, 4))
    n_sp = int(rng.integers(0, 3))
    x = np.stack([np.asarray(cx.normalize(rng.standard_normal(d)), np.float64) for _ in range(n)])
    y = rng.integers(0, c, n)
    if n_sp:
        xs = np.stack([np.asarray(cx.normalize(rng.standard_normal(d)), np.float64) for _ in range(n_sp)])
    else:
        xs = np.zeros((0, d))
    ys = rng.integers(0, c, n_sp)
    return enc, vp, vs, cls, x, y, xs, ys, tau


def _losses(enc, vp, vs, cls, x, y, xs, ys, tau):
    l1 = cx.loss_id_words(enc, vp, vs, cls, x, y, tau)[0]
    l2 = cx.loss_ood_words(enc, vp, vs, cls, x, y, xs, ys, tau)[0]
    l3 = cx.ortho_penalty_words(enc, vp, vs, cls)[0]
    return np.array([l1, l2, l3])


def _rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return np.linalg.norm(a - b) / denom


@_announce("gradient-correctness (100 instances, central differences, tol 1e-4)")
def test_gradient_correctness():
    rng = cx.make_rng(2024)
    step = 1e-3
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        enc, vp, vs, cls, x, y, xs, ys, tau = _random_instance(rng)
        _, g1p, g1s = cx.loss_id_words(enc, vp, vs, cls, x, y, tau)
        _, g2p, g2s = cx.loss_ood_words(enc, vp, vs, cls, x, y, xs, ys, tau)
        _, g3p, g3s = cx.ortho_penalty_words(enc, vp, vs, cls)
        analytic = [
            np.concatenate([g1p.ravel(), g1s.ravel()]),
            np.concatenate([g2p.ravel(), g2s.ravel()]),
            np.concatenate([g3p.ravel(), g3s.ravel()]),
        ]
        coords = vp.size + vs.size
        fd = np.zeros((3, coords))
        for flat in range(coords):
            if flat < vp.size:
                idx, target = np.unravel_index(flat, vp.shape), "p"
            else:
                idx, target = np.unravel_index(flat - vp.size, vs.shape), "s"
            vpp, vsp = vp.copy(), vs.copy()
            (vpp if target == "p" else vsp)[idx] += step
            plus = _losses(enc, vpp, vsp, cls, x, y, xs, ys, tau)
            (vpp if target == "p" else vsp)[idx] -= 2 * step
            minus = _losses(enc, vpp, vsp, cls, x, y, xs, ys, tau)
            fd[:, flat] = (plus - minus) / (2 * step)
        for li in range(3):
            worst = max(worst, _rel_err(analytic[li], fd[li]))
    elapsed = time.time() - t0
    assert worst <= 1e-4, f"worst relative error {worst:.3e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# closed-form losses
# --------------------------------------------------------------------------


def _uniform_state(c, d=6, d_w=10, m=3, seed=7):
    cls_row = 0.02 * cx.make_rng(seed, 1).standard_normal(d_w)
    state = cx.new_model_state(
        c, d, word_dim=d_w, context_len=m, num_spurious=1, seed=seed,
        class_embeddings=np.tile(cls_row, (c, 1)),
    )
    words = (0.02 * cx.make_rng(seed, 2).standard_normal((m, d_w))).astype(np.float32)
    for ctx in state.contexts:
        ctx.perceptual = words.copy()
        ctx.spurious = words[None, :, :].copy()
    state.refresh_cache()
    return state


@_announce("closed-form losses (ln(2C-1), exact zero, 2 ln 2)")
def test_closed_form_losses():
    rng = cx.make_rng(8)
    for c in (2, 3, 8):
        state = _uniform_state(c)
        x = np.stack([cx.normalize(rng.standard_normal(6)) for _ in range(5)])
        y = np.arange(5, dtype=np.int64) % c
        for tau in (1.0, 100.0):
            loss, _ = cx.loss_id(state, x, y, tau=tau)
            assert abs(loss - math.log(2 * c - 1)) < 1e-6

    single = cx.new_model_state(1, 6, word_dim=10, context_len=3, num_spurious=1, seed=9)
    x = np.stack([cx.normalize(rng.standard_normal(6)) for _ in range(4)])
    loss, grads = cx.loss_id(single, x, np.zeros(4, dtype=np.int64), tau=100.0)
    assert loss == 0.0
    assert np.all(grads.perceptual == 0.0) and np.all(grads.spurious == 0.0)

    state = _uniform_state(4)
    id_x = np.stack([cx.normalize(rng.standard_normal(6)) for _ in range(6)])
    id_y = np.array(rng.integers(0, 4, 6), dtype=np.int64)
    sp_x = np.stack([cx.normalize(rng.standard_normal(6)) for _ in range(5)])
    sp_y = np.array(rng.integers(0, 4, 5), dtype=np.int64)
    loss, _ = cx.loss_ood(state, id_x, id_y, sp_x, sp_y, tau=100.0)
    assert abs(loss - 2.0 * math.log(2.0)) < 1e-6


# --------------------------------------------------------------------------
# metric oracles
# --------------------------------------------------------------------------


def _oracle_auroc(ids, oods):
    comp = (ids[:, None] > oods[None, :]).astype(np.float64)
    comp += 0.5 * (ids[:, None] == oods[None, :])
    return float(comp.sum() / (len(ids) * len(oods)))


def _oracle_fpr(ids, oods, tpr):
    k = math.ceil(tpr * len(ids) - 1e-9)
    lam = sorted(ids.tolist(), reverse=True)[k - 1]
    return sum(1 for o in oods if o >= lam) / len(oods), lam


@_announce("metric oracles (1000 score sets incl. ties; 100 monotone maps)")
def test_metric_oracles():
    rng = cx.make_rng(2025)
    for trial in range(1000):
        n_id = int(rng.integers(1, 60))
        n_ood = int(rng.integers(1, 60))
        if trial % 3 == 0:  # integer grids force heavy ties
            ids = rng.integers(-5, 6, n_id).astype(np.float64) / 3.0
            oods = rng.integers(-5, 6, n_ood).astype(np.float64) / 3.0
        else:
            ids = rng.standard_normal(n_id)
            oods = rng.standard_normal(n_ood) - 0.5
        tpr = float(rng.choice([0.5, 0.8, 0.9, 0.95, 1.0]))
        got_fpr, got_lam = cx.fpr_at_tpr(ids, oods, tpr)
        want_fpr, want_lam = _oracle_fpr(ids, oods, tpr)
        assert got_fpr == want_fpr and got_lam == want_lam
        assert abs(cx.auroc(ids, oods) - _oracle_auroc(ids, oods)) <= 1e-12

    ids = np.round(rng.standard_normal(80), 2)
    oods = np.round(rng.standard_normal(60) - 0.3, 2)
    base_auroc = cx.auroc(ids, oods)
    base_fpr, _ = cx.fpr_at_tpr(ids, oods, 0.95)
    for trial in range(100):
        a = float(np.exp(rng.uniform(-2, 2)))
        b = float(rng.uniform(-5, 5))
        if trial % 2 == 0:
            f = lambda v: a * v + b
        else:
            f = lambda v: a * (v**3) + a * v + b  # strictly increasing
        assert abs(cx.auroc(f(ids), f(oods)) - base_auroc) <= 1e-12
        fpr, _ = cx.fpr_at_tpr(f(ids), f(oods), 0.95)
        assert fpr == base_fpr


# --------------------------------------------------------------------------
# perturbation-guided filter
# --------------------------------------------------------------------------


@_announce("guided filter (1000 candidate sets vs brute force)")
def test_guided_filter_brute_force():
    rng = cx.make_rng(2026)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        d = int(rng.integers(2, 9))
        cands = cx.normalize_rows(rng.standard_normal((n, d)))
        w = cx.normalize(rng.standard_normal(d))
        if rng.uniform() < 0.1:
            w_pert = w.copy()
        else:
            w_pert = cx.normalize(rng.standard_normal(d))
        kept = cx.guide_filter(cands, w, w_pert)
        expected = [
            row
            for row in cands
            if float(row.astype(np.float64) @ w_pert.astype(np.float64))
            > float(row.astype(np.float64) @ w.astype(np.float64))
        ]
        assert kept.shape[0] == len(expected)
        for got, want in zip(kept, expected):
            assert np.array_equal(got, want)
        if np.array_equal(w, w_pert):
            assert kept.shape[0] == 0


# --------------------------------------------------------------------------
# synthetic end-to-end benchmark
# --------------------------------------------------------------------------

E2E_TAU = 2.0


def _e2e_config(seed):
    return cx.TrainConfig(
        epochs=50,
        lr0=0.02,
        batch_size=64,
        logit_scale=E2E_TAU,
        context_len=8,
        word_dim=64,
        synthesis=cx.SynthesisConfig(
            sample_sigma=1.0, perturb_kinds=(PerturbKind.NOISE,), noise_sigma=2.0
        ),
        seed=seed,
    )


def _e2e_run(seed):
    spec = cx.SyntheticSpec(
        num_id_categories=8,
        num_ood_clusters=4,
        dim=32,
        samples_per_cluster=100,
        concentration=15.0,
        spurious_offset=0.5,
    )
    id_set, ood_set = cx.gen_synthetic(spec, cx.make_rng(seed, STREAM_GENERATOR))
    t0 = time.time()
    state = cx.train_task(id_set, _e2e_config(seed), emit=lambda s: None)
    train_seconds = time.time() - t0
    integrated = cx.evaluate(state, id_set, [("near", ood_set)], tau=E2E_TAU)
    perceptual = cx.evaluate(state, id_set, [("near", ood_set)], tau=E2E_TAU, perceptual_only=True)
    return integrated, perceptual, train_seconds


@_announce("synthetic end-to-end (acc >= 0.99, AUROC >= 0.90, FPR95 wins 4/5 seeds)")
def test_synthetic_end_to_end():
    integrated, perceptual, train_seconds = _e2e_run(seed=0)
    print(
        f"  seed=0 train {train_seconds:.1f}s acc={integrated.id_accuracy:.4f} "
        f"auroc={integrated.average.auroc:.4f} fpr95={integrated.average.fpr_at_tpr:.4f} "
        f"(perceptual fpr95={perceptual.average.fpr_at_tpr:.4f})",
        file=sys.__stdout__,
        flush=True,
    )
    assert train_seconds < 300.0, f"50-epoch training took {train_seconds:.0f}s"
    assert integrated.id_accuracy >= 0.99
    assert integrated.average.auroc >= 0.90

    wins = int(integrated.average.fpr_at_tpr <= perceptual.average.fpr_at_tpr)
    for seed in range(1, 5):
        integ, perc, _ = _e2e_run(seed)
        wins += int(integ.average.fpr_at_tpr <= perc.average.fpr_at_tpr)
        print(
            f"  seed={seed} acc={integ.id_accuracy:.4f} auroc={integ.average.auroc:.4f} "
            f"fpr95={integ.average.fpr_at_tpr:.4f} vs perceptual {perc.average.fpr_at_tpr:.4f}",
            file=sys.__stdout__,
            flush=True,
        )
    assert wins >= 4, f"integrated inference beat the ablation in only {wins}/5 seeds"


# --------------------------------------------------------------------------
# merge exactness
# --------------------------------------------------------------------------


def _merge_task(seed):
    spec = cx.SyntheticSpec(3, 2, 12, 25, concentration=25.0, spurious_offset=0.7)
    return cx.gen_synthetic(spec, cx.make_rng(seed, STREAM_GENERATOR))


def _merge_train(id_set, seed):
    cfg = cx.TrainConfig(
        epochs=5, lr0=0.02, batch_size=16, logit_scale=5.0, context_len=2, word_dim=16,
        synthesis=cx.SynthesisConfig(sample_sigma=0.5), seed=seed,
    )
    return cx.train_task(id_set, cfg, emit=lambda s: None)


@_announce("merge exactness (bit-equal per-category scores, order invariance, round-trip)")
def test_merge_exactness(tmp_path):
    id_a, ood_a = _merge_task(seed=500)
    id_b, ood_b = _merge_task(seed=501)
    model_a = _merge_train(id_a, seed=42)
    model_b = _merge_train(id_b, seed=42)

    merged = cx.merge_models([model_a, model_b])
    ca = model_a.num_categories
    batch = np.concatenate([id_a.features, id_b.features, ood_a.features])
    sm = cx.score_batch(merged, batch, tau=5.0)
    sa = cx.score_batch(model_a, batch, tau=5.0)
    sb = cx.score_batch(model_b, batch, tau=5.0)
    assert np.array_equal(sm.similarities[:, :ca], sa.similarities)
    assert np.array_equal(sm.similarities[:, ca:], sb.similarities)
    assert np.array_equal(sm.regularizers[:, :ca], sa.regularizers)
    assert np.array_equal(sm.regularizers[:, ca:], sb.regularizers)
    assert np.array_equal(sm.integrated[:, :ca], sa.integrated)
    assert np.array_equal(sm.integrated[:, ca:], sb.integrated)

    # order permutation: identical decisions and metrics after relabeling
    swapped = cx.merge_models([model_b, model_a])
    ss = cx.score_batch(swapped, batch, tau=5.0)
    cb = model_b.num_categories
    remap = np.concatenate([np.arange(cb, cb + ca), np.arange(cb)])
    assert np.array_equal(remap[ss.predicted], sm.predicted)
    assert np.array_equal(ss.ood_scores, sm.ood_scores)

    union_ab = cx.concat_feature_sets([id_a, id_b])
    union_ba = cx.concat_feature_sets([id_b, id_a])
    eval_ab = cx.evaluate(merged, union_ab, [("o", ood_a)], tau=5.0)
    eval_ba = cx.evaluate(swapped, union_ba, [("o", ood_a)], tau=5.0)
    assert eval_ab.id_accuracy == eval_ba.id_accuracy
    assert eval_ab.average.fpr_at_tpr == eval_ba.average.fpr_at_tpr
    assert eval_ab.average.auroc == eval_ba.average.auroc
    assert eval_ab.average.threshold == eval_ba.average.threshold

    # save -> load -> save round-trips are bit-identical
    p1, p2 = tmp_path / "m1.cctx", tmp_path / "m2.cctx"
    cx.write_checkpoint(merged, p1)
    cx.write_checkpoint(cx.read_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = cx.read_checkpoint(p1)
    sl = cx.score_batch(loaded, batch, tau=5.0)
    assert np.array_equal(sl.integrated, sm.integrated)
    assert np.array_equal(sl.ood_scores, sm.ood_scores)


# --------------------------------------------------------------------------
# pipeline determinism
# --------------------------------------------------------------------------


def _run_pipeline(root):
    root.mkdir()
    id_path, ood_path = root / "id.ctxf", root / "ood.ctxf"
    model_path = root / "model.cctx"
    report_json, report_csv = root / "report.json", root / "report.csv"
    config = root / "train.cfg"
    config.write_text(
        "epochs = 5\nlr0 = 0.02\nbatch_size = 32\nlogit_scale = 5\n"
        "context_len = 2\nword_dim = 16\nsynth.sigma = 0.5\nseed = 11\n"
    )
    assert (
        cli(
            [
                "gen-synthetic", "--categories", "4", "--ood-clusters", "2", "--dim", "16",
                "--per-class", "25", "--offset", "0.6", "--concentration", "20", "--seed", "11",
                "--out-id", str(id_path), "--out-ood", str(ood_path),
            ]
        )
        == 0
    )
    assert cli(["train", "--features", str(id_path), "--config", str(config), "--out", str(model_path)]) == 0
    assert (
        cli(
            ["eval", "--model", str(model_path), "--id", str(id_path), "--ood", str(ood_path), "--report", str(report_json)]
        )
        == 0
    )
    assert (
        cli(
            ["eval", "--model", str(model_path), "--id", str(id_path), "--ood", str(ood_path), "--report", str(report_csv)]
        )
        == 0
    )
    return [id_path, ood_path, model_path, report_json, report_csv]


@_announce("pipeline determinism (byte-identical checkpoints and reports)")
def test_pipeline_determinism(tmp_path):
    files_a = _run_pipeline(tmp_path / "run_a")
    files_b = _run_pipeline(tmp_path / "run_b")
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes(), f"{fa.name} differs between runs"
    payload = json.loads(files_a[3].read_text())
    assert set(payload) == {"id_accuracy", "ood", "average"}
