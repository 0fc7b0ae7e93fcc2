"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line before asserting."""

from __future__ import annotations

import dataclasses
import math
import time

import numpy as np
import pytest

from opendg import runner
from opendg.datagen import Batch, build_class_space
from opendg.evaluation import UNKNOWN, evaluate, h_score, predict_class
from opendg.gradsuite import run_suite
from opendg.losses import (
    DirichletParams,
    KernelSpec,
    LossWeights,
    coral_loss,
    cross_entropy,
    dir_mixup,
    distill_label,
    ensemble_loss,
    mmd2,
    mmd_loss,
    sample_dirichlet,
)
from opendg.model import ModelEnsemble, init_model
from opendg.numerics import Tensor
from opendg.train import METHODS, build_models, derive_seed, train_ensemble


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


# ------------------------------------------------------------------ 1


def test_c01_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(seed=0, instances=5)
    elapsed = time.perf_counter() - t0
    names = sorted({r.name for r in results})
    per_loss = {n: sum(r.passed for r in results if r.name == n) for n in names}
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and all(v >= 5 for v in per_loss.values()) and elapsed < 60
    verdict(1, ok, f"{len(results)} checks over {len(names)} losses, worst rel err {worst:.1e}, {elapsed:.1f}s")
    assert {"cross_entropy", "coral", "mmd", "l_ens_coral", "l_dir_coral", "l_dst_coral"} <= set(names)
    assert ok


# ------------------------------------------------------------------ 2


def test_c02_loss_oracles(verdict):
    coral = coral_loss([Tensor([[1.0, 0.0], [-1.0, 0.0]]), Tensor([[0.0, 1.0], [0.0, -1.0]])]).item()
    unit = KernelSpec(bandwidths=(1.0,))
    a, b = Tensor([[0.0, 0.0]]), Tensor([[1.0, 1.0]])
    pair = mmd2(a, b, unit).item()
    avg = mmd_loss([a, b], unit).item()
    expected = 2 - 2 * math.exp(-1)
    z = Tensor(np.random.default_rng(0).normal(size=(8, 5)))
    zeros = (coral_loss([z, z, z]).item(), mmd_loss([z, z, z], KernelSpec()).item(), mmd_loss([z, z], unit).item())
    ok = (
        abs(coral - 4.0) <= 1e-12
        and abs(pair - expected) <= 1e-12
        and abs(avg - 2 * expected / 4) <= 1e-12
        and zeros == (0.0, 0.0, 0.0)
    )
    verdict(2, ok, f"coral={coral!r} mmd_pair={pair!r} (2-2/e={expected!r}) identical={zeros}")
    assert ok


# ------------------------------------------------------------------ 3


def test_c03_simplex_properties(verdict):
    rng = np.random.default_rng(0)
    params = DirichletParams((0.6, 0.2, 0.2))
    draws = np.array([sample_dirichlet(params, rng) for _ in range(10_000)])
    mean_err = float(np.max(np.abs(draws.mean(axis=0) - params.mean)))

    worst_row = 0.0
    for k in range(100):
        m = 2 + k % 3
        feats = [Tensor(rng.normal(size=(4, 3))) for _ in range(m)]
        labels = [np.eye(5)[rng.integers(0, 5, size=4)] for _ in range(m)]
        lam = sample_dirichlet(DirichletParams.peaked(k % m, m), rng)
        _, y = dir_mixup(feats, labels, lam)
        peers = [init_model(3, feature_dim=3, num_classes=5, seed=k * 7 + j, hidden=(4,)) for j in range(m - 1)]
        yd = distill_label(peers, rng.normal(size=(4, 3)) * 3, sample_dirichlet(DirichletParams.flat(m - 1), rng))
        worst_row = max(worst_row, float(np.abs(y.sum(1) - 1).max()), float(np.abs(yd.sum(1) - 1).max()))

    feats = [Tensor(rng.normal(size=(4, 3))) for _ in range(3)]
    labels = [np.eye(5)[rng.integers(0, 5, size=4)] for _ in range(3)]
    z, y = dir_mixup(feats, labels, np.eye(3)[2])
    exact = np.array_equal(z.values, feats[2].values) and np.array_equal(y, labels[2])

    ok = mean_err <= 0.02 and worst_row <= 1e-9 and exact
    verdict(3, ok, f"Dirichlet mean err {mean_err:.4f}, worst row-sum err {worst_row:.1e}, one-hot exact={exact}")
    assert ok


# ------------------------------------------------------------------ 4


def _brute_predict(row, delta):
    if all(p < delta for p in row):
        return UNKNOWN
    best = 0
    for c in range(1, len(row)):
        if row[c] > row[best]:
            best = c
    return best


def test_c04_detection_and_metrics(verdict):
    rng = np.random.default_rng(0)
    # probabilities on a 1/20 grid so rows hit each threshold exactly
    counts = rng.multinomial(20, np.ones(5) / 5, size=1000)
    probs = counts / 20.0
    deltas = [k / 20.0 for k in (2, 3, 4, 5, 6, 7, 8, 10, 12, 15)]
    mismatches = 0
    boundary_rows = 0
    for d in deltas:
        got = predict_class(probs, d)
        want = np.array([_brute_predict(list(r), d) for r in probs])
        mismatches += int(np.sum(got != want))
        boundary_rows += int(np.sum(np.isclose(probs.max(axis=1), d, atol=0, rtol=0)))
    edge = predict_class(np.array([[0.5, 0.5, 0.0]]), 0.5)[0]

    h = h_score(0.6, 0.4)

    spec = build_class_space("officehome_like", major=1, middle=1, minor=1, unknown=2)
    recount_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 40))
        truth = rng.choice(spec.target_classes, size=n)
        pred = rng.choice(list(spec.known) + [UNKNOWN], size=n)
        r = evaluate(pred, truth, spec)
        known = np.isin(truth, spec.known)
        unk = ~known
        acc = float(np.mean(pred[known] == truth[known])) if known.any() else 0.0
        det = float(np.mean(pred[unk] == UNKNOWN)) if unk.any() else 0.0
        k = spec.num_known
        cm = r.confusion
        recount_ok &= r.acc_known == acc and r.acc_unknown_detect == det
        recount_ok &= int(cm.sum()) == n and int(cm[k].sum()) == int(unk.sum())
        recount_ok &= r.h_score == h_score(acc, det)

    ok = mismatches == 0 and boundary_rows > 0 and edge == 0 and h == 0.48 and recount_ok
    verdict(4, ok, f"{mismatches} mismatches over 1000 rows x 10 deltas ({boundary_rows} rows at a boundary), "
                   f"h(0.6,0.4)={h!r}, recount={recount_ok}")
    assert ok


# ------------------------------------------------------------------ 5


def test_c05_erm_reduction(verdict):
    rng = np.random.default_rng(0)
    equal = 0
    for k in range(20):
        model = init_model(4, feature_dim=6, num_classes=5, seed=k, hidden=(8,))
        y = rng.integers(0, 5, size=int(rng.integers(2, 33)))
        batch = Batch(rng.normal(size=(y.size, 4)) * 2, np.eye(5)[y], y, np.arange(y.size))
        reg = ("coral", "mmd", "none")[k % 3]
        lhs = ensemble_loss(0, ModelEnsemble([model]), [batch], LossWeights((1.0,), gamma=0.0), reg).item()
        rhs = cross_entropy(batch.one_hot, model.logits(batch.inputs)).item()
        equal += lhs == rhs
    verdict(5, equal == 20, f"{equal}/20 batches bit-identical")
    assert equal == 20


# ------------------------------------------------------------------ 6


def test_c06_determinism_and_parallel(verdict, tmp_path):
    a = runner.run_experiment(runner.demo_config(seed=0, out_dir=str(tmp_path / "a")))
    b = runner.run_experiment(runner.demo_config(seed=0, out_dir=str(tmp_path / "b")))
    same_demo = [r.metrics() for r in a] == [r.metrics() for r in b]

    cfg = runner.default_config()
    problem = runner.rotation_problem(cfg, 0, derive_seed(0, "data", 0, 0))
    states = []
    for workers in (1, 3):
        tcfg = dataclasses.replace(cfg.train, method="e_coral", max_epochs=8, workers=workers)
        e = build_models(tcfg, problem.target.dim, problem.spec.num_known, 3)
        train_ensemble(e, problem.sources, problem.spec, tcfg)
        states.append([m.get_state() for m in e.members])
    same_params = all(np.array_equal(p, q) for s, t in zip(*states) for p, q in zip(s, t))

    ok = same_demo and same_params
    verdict(6, ok, f"demo records identical={same_demo} ({len(a)} records), e_coral serial vs 3 workers identical={same_params}")
    assert ok


# ------------------------------------------------------------------ 7


def test_c07_alignment_smoke(verdict):
    cfg = runner.default_config(methods=("erm", "coral", "mmd"), trials=3, seed=0)
    t0 = time.perf_counter()
    records = runner.run_experiment(cfg, write=False)
    elapsed = time.perf_counter() - t0

    def trial_mean(method, field, trial=None):
        rs = [r for r in records if r.method == method and (trial is None or r.trial == trial)]
        return float(np.mean([getattr(r, field) for r in rs]))

    parts = []
    ok = elapsed < 600
    for method, dist in (("coral", "val_coral"), ("mmd", "val_mmd")):
        h_better = trial_mean(method, "h_score") > trial_mean("erm", "h_score")
        reductions = [1 - trial_mean(method, dist, t) / trial_mean("erm", dist, t) for t in range(3)]
        dist_ok = all(r >= 0.20 for r in reductions)
        mode = "strict" if h_better else "fallback"
        ok &= dist_ok
        parts.append(
            f"{method}: H {trial_mean(method, 'h_score'):.3f} vs erm {trial_mean('erm', 'h_score'):.3f} ({mode}), "
            f"{dist} reduction per seed {[round(r, 3) for r in reductions]}"
        )
    verdict(7, ok, "; ".join(parts) + f"; {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 8 and 9


@pytest.fixture(scope="module")
def all_methods():
    cfg = runner.default_config(methods=METHODS, trials=3, seed=0)
    return runner.run_experiment(cfg, write=False)


def test_c08_source_accuracy(verdict, all_methods):
    def src(method):
        return float(np.mean([r.source_acc for r in all_methods if r.method == method]))

    pairs = [("e_coral", "coral"), ("e_mmd", "mmd")]
    ok = all(src(e) >= src(s) - 0.01 for e, s in pairs)
    verdict(8, ok, ", ".join(f"{e} {src(e):.4f} vs {s} {src(s):.4f}" for e, s in pairs))
    assert ok


def test_c09_timing_order(verdict, all_methods):
    t = runner.time_epochs(all_methods)
    checks = [("erm", "coral"), ("erm", "mmd"), ("coral", "e_coral"), ("mmd", "e_mmd")]
    for reg in ("coral", "mmd"):
        checks += [(f"e_{reg}", f"edir_{reg}"), (f"e_{reg}", f"edst_{reg}")]
    failed = [f"{a}<={b}" for a, b in checks if not t[a] <= t[b]]
    ok = not failed
    detail = " ".join(f"{m}={t[m] * 1000:.1f}ms" for m in METHODS)
    verdict(9, ok, detail + (f"; violated: {failed}" if failed else ""))
    assert ok


# ------------------------------------------------------------------ 10


def test_c10_tier_reporting(verdict):
    base = runner.default_config()
    train = dataclasses.replace(base.train, max_epochs=5)
    pacs = runner.run_cell(dataclasses.replace(base, train=train), "erm", 0, 0)
    oh_problem = dataclasses.replace(base.problem, preset="officehome_like",
                                     preset_params={"major": 1, "middle": 1, "minor": 1, "unknown": 1})
    oh = runner.run_cell(dataclasses.replace(base, train=train, problem=oh_problem), "e_coral", 0, 0)
    pacs_ok = pacs.tier_major is None and pacs.tier_middle is not None and pacs.tier_minor is not None
    oh_ok = None not in (oh.tier_major, oh.tier_middle, oh.tier_minor)
    verdict(10, pacs_ok and oh_ok,
            f"pacs_like (major, middle, minor)=({pacs.tier_major}, {pacs.tier_middle:.3f}, {pacs.tier_minor:.3f}); "
            f"officehome_like=({oh.tier_major:.3f}, {oh.tier_middle:.3f}, {oh.tier_minor:.3f})")
    assert pacs_ok and oh_ok
