from __future__ import annotations

import numpy as np
import pytest

from opendg.datagen import IDENTITY_SHIFT, build_class_space, generate_problem
from opendg.errors import ConfigError
from opendg.model import ModelEnsemble
from opendg.train import (
    METHODS,
    TrainConfig,
    build_models,
    derive_seed,
    parse_method,
    sgd_step,
    train_ensemble,
    train_single,
)


@pytest.fixture(scope="module")
def problem():
    spec = build_class_space("pacs_like")
    return generate_problem(spec, [IDENTITY_SHIFT] * 4, 12, 4, seed=0)


def _cfg(method, **kw):
    base = dict(method=method, max_epochs=3, batch_size=8, hidden=(6,), feature_dim=5, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_parse_method_lists_valid_names():
    assert parse_method("edir_mmd").reg == "mmd"
    with pytest.raises(ConfigError) as exc:
        parse_method("dann")
    for name in METHODS:
        assert name in str(exc.value)


def test_config_defaults_follow_tables():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.max_epochs) == (0.001, 0.9, 32, 100)
    assert (cfg.early_stop_patience, cfg.gamma, cfg.distill_temperature) == (10, 1.0, 2.0)
    assert cfg.mixup_params(0, 3).alpha == (0.6, 0.2, 0.2)
    assert cfg.loss_weights(2, 3).w == (1.0, 1.0, 3.0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(0, "data", 1, 2) == derive_seed(0, "data", 1, 2)
    assert derive_seed(0, "data", 1, 2) != derive_seed(0, "data", 2, 1)
    assert derive_seed(0, "a") != derive_seed(1, "a")


def test_sgd_step_momentum_arithmetic():
    p, v = sgd_step([np.array([1.0])], [np.array([2.0])], [np.array([0.5])], lr=0.1, momentum=0.9)
    assert v[0][0] == pytest.approx(0.9 * 0.5 + 2.0)
    assert p[0][0] == pytest.approx(1.0 - 0.1 * 2.45)


def test_train_single_deterministic_and_restores_best(problem):
    runs = []
    for _ in range(2):
        cfg = _cfg("coral", max_epochs=6, early_stop_patience=2)
        model = build_models(cfg, 4, problem.spec.num_known, 3)
        rep = train_single(model, problem.sources, problem.spec, cfg)
        runs.append((rep, model))
    (a, ma), (b, mb) = runs
    for p, q in zip(ma.params, mb.params):
        np.testing.assert_array_equal(p.values, q.values)
    assert a.best_epoch <= a.epochs_run
    for p, q in zip(ma.get_state(), a.params):
        np.testing.assert_array_equal(p, q)


def test_single_rejects_ensemble_method(problem):
    cfg = _cfg("e_coral")
    with pytest.raises(ConfigError):
        train_single(build_models(_cfg("erm"), 4, 6, 3), problem.sources, problem.spec, cfg)


def test_validation_callback_drives_early_stopping(problem):
    cfg = _cfg("erm", max_epochs=20, early_stop_patience=3)
    model = build_models(cfg, 4, 6, 3)
    rep = train_single(model, problem.sources, problem.spec, cfg, val_fn=lambda epoch, m: 1.0 if epoch == 2 else 0.0)
    assert rep.best_epoch == 2
    assert rep.epochs_run == 5


@pytest.mark.parametrize("method", ["e_mmd", "edir_coral", "edst_mmd"])
def test_ensemble_methods_run_and_report_per_member(problem, method):
    cfg = _cfg(method)
    e = build_models(cfg, 4, 6, 3)
    reports = train_ensemble(e, problem.sources, problem.spec, cfg)
    assert len(reports) == 3
    assert all(len(r.per_epoch_seconds) == r.epochs_run for r in reports)
    assert all(np.isfinite(r.epoch_losses).all() for r in reports)


def test_members_read_peers_only_from_snapshots(problem):
    cfg = _cfg("edir_coral", max_epochs=1)
    e = build_models(cfg, 4, 6, 3)
    before = [m.get_state() for m in e.members]
    observed = []

    def hook(i, step, p, batches):
        observed.append((i, p.lam))

    train_ensemble(e, problem.sources, problem.spec, cfg, on_step=hook)
    assert {i for i, _ in observed} == {0, 1, 2}
    assert all(lam is not None and abs(lam.sum() - 1) < 1e-12 for _, lam in observed)
    # every member moved
    assert all(not np.array_equal(b[0], m.get_state()[0]) for b, m in zip(before, e.members))


def test_parallel_members_match_serial(problem):
    states = []
    for workers in (1, 3):
        cfg = _cfg("edst_coral", max_epochs=2, workers=workers)
        e = build_models(cfg, 4, 6, 3)
        train_ensemble(e, problem.sources, problem.spec, cfg)
        states.append([m.get_state() for m in e.members])
    for a, b in zip(*states):
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p, q)


def test_global_early_stop_scope(problem):
    cfg = _cfg("e_coral", max_epochs=4, early_stop_scope="global")
    e = build_models(cfg, 4, 6, 3)
    reports = train_ensemble(e, problem.sources, problem.spec, cfg)
    assert len({r.best_epoch for r in reports}) == 1


def test_ensemble_size_must_match_sources(problem):
    cfg = _cfg("e_coral")
    e = ModelEnsemble.create(2, 4, 5, 6, seeds=[1, 2], hidden=(6,))
    with pytest.raises(ConfigError):
        train_ensemble(e, problem.sources, problem.spec, cfg)
