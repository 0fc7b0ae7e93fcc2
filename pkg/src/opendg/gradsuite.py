"""Finite-difference checks for every loss on small seeded instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .datagen import Batch
from .losses import (
    DirichletParams,
    KernelSpec,
    LossWeights,
    coral_loss,
    cross_entropy,
    ensemble_loss,
    l_dir,
    l_dst,
    mmd_loss,
    sample_dirichlet,
)
from .model import DomainModel, ModelEnsemble, init_model
from .numerics import Tensor

EPS = 1e-6
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    instance: int
    max_rel_err: float
    passed: bool


def _split(x: Tensor, sizes: list[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(nx.row_slice(x, start, start + n))
        start += n
    return out


def _batches(rng: np.random.Generator, m: int, n: int, dim: int, classes: int) -> list[Batch]:
    out = []
    for _ in range(m):
        labels = rng.integers(0, classes, size=n)
        out.append(Batch(rng.normal(size=(n, dim)), np.eye(classes)[labels], labels, np.arange(n)))
    return out


def _param_check(name: str, instance: int, model: DomainModel, loss: Callable[[], Tensor]) -> CheckResult:
    """Check d loss / d theta for every parameter tensor of ``model``, one at a time."""
    worst = 0.0
    slots = []
    for mlp in (model.extractor, model.classifier):
        for k in range(len(mlp.weights)):
            slots.append((mlp.weights, k))
            slots.append((mlp.biases, k))
    for holder, k in slots:
        original = holder[k]

        def f(leaf: Tensor, holder=holder, k=k) -> Tensor:
            holder[k] = leaf
            try:
                return loss()
            finally:
                holder[k] = original

        rep = nx.grad_check(f, original.values, eps=EPS, tol=TOL)
        worst = max(worst, rep.max_rel_err)
    return CheckResult(name, instance, worst, worst <= TOL)


def _small_ensemble(rng: np.random.Generator, m: int, dim: int, classes: int) -> ModelEnsemble:
    return ModelEnsemble([init_model(dim, 3, classes, int(rng.integers(2**31)), hidden=(4,)) for _ in range(m)])


def run_suite(seed: int = 0, instances: int = 5) -> list[CheckResult]:
    results: list[CheckResult] = []
    m, n, dim, classes = 3, 4, 3, 4
    kernel = KernelSpec()
    for inst in range(instances):
        rng = np.random.default_rng([seed, inst])

        # cross-entropy with soft targets, gradient w.r.t. the logits
        targets = rng.dirichlet(np.ones(classes), size=n)
        rep = nx.grad_check(lambda z: cross_entropy(targets, z), rng.normal(size=(n, classes)), EPS, TOL)
        results.append(CheckResult("cross_entropy", inst, rep.max_rel_err, rep.passed))

        # alignment losses, gradient w.r.t. the stacked domain features
        sizes = [int(s) for s in rng.integers(3, 6, size=m)]
        feats = rng.normal(size=(sum(sizes), 3))
        rep = nx.grad_check(lambda z: coral_loss(_split(z, sizes)), feats, EPS, TOL)
        results.append(CheckResult("coral", inst, rep.max_rel_err, rep.passed))
        rep = nx.grad_check(lambda z: mmd_loss(_split(z, sizes), kernel), feats, EPS, TOL)
        results.append(CheckResult("mmd", inst, rep.max_rel_err, rep.passed))

        # ensemble objectives, gradient w.r.t. member i's parameters
        e = _small_ensemble(rng, m, dim, classes)
        batches = _batches(rng, m, n, dim, classes)
        i = inst % m
        weights = LossWeights.for_member(i, m)
        peers = [member.snapshot() for member in e.members]
        lam_mix = sample_dirichlet(DirichletParams.peaked(i, m), rng)
        lam_dst = sample_dirichlet(DirichletParams.flat(m - 1), rng)
        for reg in ("coral", "mmd"):
            results.append(_param_check(
                f"l_ens_{reg}", inst, e[i],
                lambda reg=reg: ensemble_loss(i, e, batches, weights, reg, kernel),
            ))
            results.append(_param_check(
                f"l_dir_{reg}", inst, e[i],
                lambda reg=reg: l_dir(i, e, batches, weights, reg, rng, kernel=kernel, peers=peers, lam=lam_mix),
            ))
            results.append(_param_check(
                f"l_dst_{reg}", inst, e[i],
                lambda reg=reg: l_dst(i, e, batches, weights, reg, rng, kernel=kernel, peers=peers, lam=lam_dst),
            ))
    return results
