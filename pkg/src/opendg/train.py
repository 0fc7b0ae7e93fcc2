"""Momentum SGD, single-model and ensemble training loops, early stopping."""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datagen import BatchSampler, ClassSpaceSpec, DomainDataset
from .errors import ConfigError, DimensionError, PreconditionError
from .losses import (
    DirichletParams,
    KernelSpec,
    LossWeights,
    MemberPass,
    _member_pass,
    cross_entropy,
    dir_pass,
    dst_pass,
    regularizer,
)
from .model import DomainModel, ModelEnsemble, init_model

log = logging.getLogger(__name__)

SINGLE_METHODS = ("erm", "coral", "mmd")
ENSEMBLE_METHODS = ("e_coral", "e_mmd", "edir_coral", "edir_mmd", "edst_coral", "edst_mmd")
METHODS = SINGLE_METHODS + ENSEMBLE_METHODS


@dataclass(frozen=True)
class MethodSpec:
    name: str
    ensemble: bool
    reg: str
    extension: str  # "none", "dir" or "dst"


def parse_method(name: str) -> MethodSpec:
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
    if name == "erm":
        return MethodSpec(name, False, "none", "none")
    if name in ("coral", "mmd"):
        return MethodSpec(name, False, name, "none")
    prefix, reg = name.split("_")
    return MethodSpec(name, True, reg, {"e": "none", "edir": "dir", "edst": "dst"}[prefix])


def derive_seed(base: int, *keys) -> int:
    """Stable 32-bit seed from a base seed and any mix of ints and strings."""
    words = [int(base) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode("utf-8"))
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    # loss weights
    gamma: float = 1.0
    own_weight: float = 3.0
    other_weight: float = 1.0
    distill_temperature: float = 2.0
    extra_weight: float = 1.0
    # Dirichlet parameters
    mixup_alpha_own: float = 0.6
    mixup_alpha_other: float = 0.2
    distill_alpha: float = 1.0
    mixup_features: str = "peer"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    # architecture
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 64
    # ensemble behaviour
    member_seeds: tuple[int, ...] | None = None
    snapshot_refresh: str = "epoch"
    early_stop_scope: str = "member"
    member_selection: str = "pooled"
    workers: int = 1
    verbose: bool = False
    # test hook: force the Dir-mixup weights onto the member's own domain
    mixup_vertex: bool = False

    def __post_init__(self) -> None:
        parse_method(self.method)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.snapshot_refresh not in ("epoch", "step"):
            raise ConfigError("snapshot_refresh must be 'epoch' or 'step'")
        if self.early_stop_scope not in ("member", "global"):
            raise ConfigError("early_stop_scope must be 'member' or 'global'")
        if self.member_selection not in ("pooled", "weighted"):
            raise ConfigError("member_selection must be 'pooled' or 'weighted'")
        if self.mixup_features not in ("peer", "own"):
            raise ConfigError("mixup_features must be 'peer' or 'own'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def method_spec(self) -> MethodSpec:
        return parse_method(self.method)

    def loss_weights(self, i: int, m: int) -> LossWeights:
        return LossWeights.for_member(
            i,
            m,
            self.own_weight,
            self.other_weight,
            gamma=self.gamma,
            distill_temperature=self.distill_temperature,
            extra_weight=self.extra_weight,
        )

    def mixup_params(self, i: int, m: int) -> DirichletParams:
        return DirichletParams.peaked(i, m, self.mixup_alpha_own, self.mixup_alpha_other)

    def distill_params(self, m: int) -> DirichletParams:
        return DirichletParams.flat(m - 1, self.distill_alpha)

    def seeds_for(self, m: int) -> tuple[int, ...]:
        if self.member_seeds is not None:
            if len(self.member_seeds) != m:
                raise ConfigError(f"{m} members but {len(self.member_seeds)} member seeds")
            return tuple(self.member_seeds)
        return tuple(derive_seed(self.seed, "member", i) for i in range(m))


@dataclass
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_val_acc: float
    per_epoch_seconds: list[float]
    epoch_losses: list[float]
    params: list[np.ndarray]

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.per_epoch_seconds)) if self.per_epoch_seconds else 0.0


# ---------------------------------------------------------------- optimizer


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Classical momentum: ``v <- momentum * v + g``, ``theta <- theta - lr * v``."""
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(velocity)} velocities")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = np.zeros_like(p)
        if not p.shape == g.shape == v.shape:
            raise DimensionError(f"sgd_step: shapes {p.shape}, {g.shape}, {v.shape} disagree")
        v_new = momentum * v + g
        new_velocity.append(v_new)
        new_params.append(p - lr * v_new)
    return new_params, new_velocity


class MomentumSGD:
    def __init__(self, params: Sequence[nx.Tensor], lr: float, momentum: float) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        new_p, self.velocity = sgd_step(
            [p.values for p in self.params],
            [p.grad for p in self.params],
            self.velocity,
            self.lr,
            self.momentum,
        )
        for p, v in zip(self.params, new_p):
            p.values = v

    def zero_grad(self) -> None:
        nx.zero_grads(self.params)


# ---------------------------------------------------------------- helpers


def _pooled_validation(sources: Sequence[DomainDataset], spec: ClassSpaceSpec):
    xs, cols, dom = [], [], []
    for k, ds in enumerate(sources):
        x, y = ds.validation()
        xs.append(x)
        cols.append(np.array([spec.column(int(v)) for v in y], dtype=np.int64))
        dom.append(np.full(len(y), k))
    return np.vstack(xs), np.concatenate(cols), np.concatenate(dom)


def closed_set_accuracy(probs: np.ndarray, columns: np.ndarray) -> float:
    if len(columns) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == columns))


class _Validator:
    def __init__(self, sources: Sequence[DomainDataset], spec: ClassSpaceSpec) -> None:
        self.x, self.cols, self.domain = _pooled_validation(sources, spec)
        self.m = len(sources)

    def pooled(self, probs: np.ndarray) -> float:
        return closed_set_accuracy(probs, self.cols)

    def weighted(self, probs: np.ndarray, w: Sequence[float]) -> float:
        hits = np.argmax(probs, axis=1) == self.cols
        accs = [float(hits[self.domain == k].mean()) if np.any(self.domain == k) else 0.0 for k in range(self.m)]
        return float(np.dot(w, accs) / np.sum(w))


def _steps_per_epoch(sources: Sequence[DomainDataset], batch_size: int) -> int:
    return math.ceil(max(ds.train_idx.size for ds in sources) / batch_size)


def _samplers(sources, spec, batch_size, seed) -> list[BatchSampler]:
    return [
        BatchSampler(ds, spec, batch_size, np.random.default_rng(derive_seed(seed, "batches", k)))
        for k, ds in enumerate(sources)
    ]


def _emit(verbose: bool, **record) -> None:
    if verbose:
        print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


class _EarlyStopper:
    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0
        self.best_state: list[np.ndarray] | None = None

    def update(self, epoch: int, value: float, state: Callable[[], list[np.ndarray]]) -> bool:
        """Record ``value``; return True once training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            self.best_state = state()
            return False
        self.bad += 1
        return self.bad >= self.patience


# ----------------------------------------------------------- single model


def train_single(
    model: DomainModel,
    sources: Sequence[DomainDataset],
    spec: ClassSpaceSpec,
    cfg: TrainConfig,
    *,
    val_fn: Callable[[int, DomainModel], float] | None = None,
) -> TrainReport:
    """One shared model over all source domains (ERM, CORAL or MMD)."""
    if not sources:
        raise PreconditionError("train_single needs at least one source domain")
    method = cfg.method_spec
    if method.ensemble:
        raise ConfigError(f"{cfg.method} is an ensemble method; use train_ensemble")
    samplers = _samplers(sources, spec, cfg.batch_size, cfg.seed)
    steps = _steps_per_epoch(sources, cfg.batch_size)
    opt = MomentumSGD(model.params, cfg.learning_rate, cfg.momentum)
    validator = _Validator(sources, spec)
    stopper = _EarlyStopper(cfg.early_stop_patience)
    seconds: list[float] = []
    losses: list[float] = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        for _ in range(steps):
            batches = [s.next() for s in samplers]
            opt.zero_grad()
            loss = single_model_loss(model, batches, method.reg, cfg.gamma, cfg.kernel)
            nx.backward(loss)
            opt.step()
            running += loss.item()
        seconds.append(time.perf_counter() - t0)
        losses.append(running / steps)
        if val_fn is not None:
            val = val_fn(epoch, model)
        else:
            val = validator.pooled(model.predict_proba(validator.x))
        _emit(cfg.verbose, method=cfg.method, epoch=epoch, train_loss=losses[-1], val_acc=val, seconds=seconds[-1])
        if stopper.update(epoch, val, model.get_state):
            break
    if stopper.best_state is not None:
        model.set_state(stopper.best_state)
    return TrainReport(epoch, stopper.best_epoch, stopper.best, seconds, losses, model.get_state())


def single_model_loss(model: DomainModel, batches, reg: str, gamma: float, kernel: KernelSpec | None = None) -> nx.Tensor:
    """Pooled cross-entropy over all domain batches plus ``gamma`` times the alignment term."""
    feats = [model.features(b.inputs) for b in batches]
    logits = nx.concat_rows([model.logits_from_features(z) for z in feats])
    targets = np.vstack([b.one_hot for b in batches])
    loss = cross_entropy(targets, logits)
    reg_term = regularizer(reg, feats, kernel)
    if reg_term is not None:
        loss = nx.add(loss, nx.scale(reg_term, gamma))
    return loss


# ---------------------------------------------------------------- ensemble


@dataclass
class MemberState:
    index: int
    model: DomainModel
    velocity: list[np.ndarray]
    samplers: list[BatchSampler]
    rng: np.random.Generator
    seconds: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    pending_seconds: float = 0.0
    pending_loss: float = 0.0
    pending_steps: int = 0

    def close_epoch(self) -> None:
        self.seconds.append(self.pending_seconds)
        self.losses.append(self.pending_loss / max(self.pending_steps, 1))
        self.pending_seconds = self.pending_loss = 0.0
        self.pending_steps = 0


StepHook = Callable[[int, int, MemberPass, Sequence], None]


def _member_step(
    state: MemberState,
    peers: Sequence[DomainModel] | None,
    spec: ClassSpaceSpec,
    cfg: TrainConfig,
    m: int,
    step_no: int,
    on_step: StepHook | None = None,
) -> None:
    method = cfg.method_spec
    i = state.index
    model = state.model
    weights = cfg.loss_weights(i, m)
    batches = [s.next() for s in state.samplers]
    view = _MemberView(i, model, m)
    model.zero_grad()
    if method.extension == "dir":
        lam = np.eye(m)[i] if cfg.mixup_vertex else None
        p = dir_pass(
            i, view, batches, weights, method.reg, state.rng,
            alpha=cfg.mixup_params(i, m), kernel=cfg.kernel, peers=peers,
            mixup_features=cfg.mixup_features, lam=lam,
        )
    elif method.extension == "dst":
        p = dst_pass(
            i, view, batches, weights, method.reg, state.rng,
            alpha=cfg.distill_params(m), kernel=cfg.kernel, peers=peers,
        )
    else:
        p = _member_pass(model, batches, weights, method.reg, cfg.kernel)
    if on_step is not None:
        on_step(i, step_no, p, batches)
    nx.backward(p.total)
    new_p, state.velocity = sgd_step(
        [t.values for t in model.params],
        [t.grad for t in model.params],
        state.velocity,
        cfg.learning_rate,
        cfg.momentum,
    )
    for t, v in zip(model.params, new_p):
        t.values = v
    state.pending_loss += p.total.item()
    state.pending_steps += 1


class _MemberView:
    """Indexable stand-in for the ensemble that only exposes member ``i``.

    Peer access goes through the read-only snapshots, so a member's update
    never touches another member's live parameters.
    """

    def __init__(self, i: int, model: DomainModel, m: int) -> None:
        self.i, self.model, self.m = i, model, m

    def __getitem__(self, k: int) -> DomainModel:
        if k != self.i:
            raise PreconditionError("peer models must be read from snapshots")
        return self.model

    def __len__(self) -> int:
        return self.m

    @property
    def members(self):
        raise PreconditionError("peer models must be read from snapshots")


def _run_member_steps(
    state: MemberState,
    peers: Sequence[DomainModel] | None,
    spec: ClassSpaceSpec,
    cfg: TrainConfig,
    m: int,
    n_steps: int,
    first_step: int = 0,
    on_step: StepHook | None = None,
) -> MemberState:
    t0 = time.perf_counter()
    for s in range(n_steps):
        _member_step(state, peers, spec, cfg, m, first_step + s, on_step)
    state.pending_seconds += time.perf_counter() - t0
    return state


_WORKER: dict = {}


def _init_worker(sources, spec, cfg) -> None:
    _WORKER.update(sources=sources, spec=spec, cfg=cfg)


def _worker_epoch(state: MemberState, peers, m: int, n_steps: int) -> MemberState:
    for sampler, ds in zip(state.samplers, _WORKER["sources"]):
        sampler.attach(ds)
    return _run_member_steps(state, peers, _WORKER["spec"], _WORKER["cfg"], m, n_steps)


def train_ensemble(
    ensemble: ModelEnsemble,
    sources: Sequence[DomainDataset],
    spec: ClassSpaceSpec,
    cfg: TrainConfig,
    *,
    on_step: StepHook | None = None,
    val_fn: Callable[[int, int, DomainModel], float] | None = None,
) -> list[TrainReport]:
    """Train member i on its own objective; peers are read from per-epoch snapshots."""
    method = cfg.method_spec
    if not method.ensemble:
        raise ConfigError(f"{cfg.method} is a single-model method; use train_single")
    m = len(sources)
    if len(ensemble) != m:
        raise ConfigError(f"ensemble has {len(ensemble)} members but there are {m} source domains")
    needs_peers = method.extension != "none"
    steps = _steps_per_epoch(sources, cfg.batch_size)
    validator = _Validator(sources, spec)

    states = []
    for i, member in enumerate(ensemble.members):
        member_seed = derive_seed(cfg.seed, "member-data", i)
        states.append(
            MemberState(
                i,
                member,
                [np.zeros_like(p.values) for p in member.params],
                _samplers(sources, spec, cfg.batch_size, member_seed),
                np.random.default_rng(derive_seed(member_seed, "mixing")),
            )
        )

    workers = cfg.workers
    lockstep = needs_peers and cfg.snapshot_refresh == "step"
    if workers > 1 and (lockstep or on_step is not None):
        log.warning("per-step snapshots and step hooks run serially; ignoring workers=%d", workers)
        workers = 1
    pool = None
    if workers > 1:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn")
        pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker, initargs=(list(sources), spec, cfg))

    stoppers = [_EarlyStopper(cfg.early_stop_patience) for _ in range(m)]
    global_stopper = _EarlyStopper(cfg.early_stop_patience)
    active = [True] * m
    epochs_run = [0] * m
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            live = [k for k in range(m) if active[k]]
            if not live:
                break
            if lockstep:
                for s in range(steps):
                    peers = [st.model.snapshot() for st in states]
                    for k in live:
                        _run_member_steps(states[k], peers, spec, cfg, m, 1, s, on_step)
            else:
                peers = [st.model.snapshot() for st in states] if needs_peers else None
                if pool is None:
                    for k in live:
                        _run_member_steps(states[k], peers, spec, cfg, m, steps, 0, on_step)
                else:
                    futures = [pool.submit(_worker_epoch, states[k], peers, m, steps) for k in live]
                    for k, fut in zip(live, futures):
                        fresh = fut.result()
                        for sampler, ds in zip(fresh.samplers, sources):
                            sampler.attach(ds)
                        states[k] = fresh
                        ensemble.members[k] = fresh.model
            for k in live:
                states[k].close_epoch()
                epochs_run[k] = epoch

            if cfg.early_stop_scope == "global":
                probs = np.mean([st.model.predict_proba(validator.x) for st in states], axis=0)
                val = validator.pooled(probs)
                _emit(cfg.verbose, method=cfg.method, epoch=epoch, val_acc=val,
                      train_loss=float(np.mean([states[k].losses[-1] for k in live])),
                      seconds=float(sum(states[k].seconds[-1] for k in live)))
                snapshot = lambda: [p for st in states for p in st.model.get_state()]
                if global_stopper.update(epoch, val, snapshot):
                    active = [False] * m
                continue

            for k in live:
                model = states[k].model
                if val_fn is not None:
                    val = val_fn(k, epoch, model)
                elif cfg.member_selection == "weighted":
                    val = validator.weighted(model.predict_proba(validator.x), cfg.loss_weights(k, m).w)
                else:
                    val = validator.pooled(model.predict_proba(validator.x))
                _emit(cfg.verbose, method=cfg.method, member=k, epoch=epoch, train_loss=states[k].losses[-1],
                      val_acc=val, seconds=states[k].seconds[-1])
                if stoppers[k].update(epoch, val, model.get_state):
                    active[k] = False
                    # a stopped member's selected parameters are what its peers see from now on
                    model.set_state(stoppers[k].best_state)
    finally:
        if pool is not None:
            pool.shutdown()

    reports = []
    if cfg.early_stop_scope == "global":
        flat = global_stopper.best_state
        n_per = len(states[0].model.params)
        for k, st in enumerate(states):
            if flat is not None:
                st.model.set_state(flat[k * n_per : (k + 1) * n_per])
            reports.append(
                TrainReport(epochs_run[k], global_stopper.best_epoch, global_stopper.best,
                            st.seconds, st.losses, st.model.get_state())
            )
        return reports
    for k, st in enumerate(states):
        if stoppers[k].best_state is not None:
            st.model.set_state(stoppers[k].best_state)
        reports.append(
            TrainReport(epochs_run[k], stoppers[k].best_epoch, stoppers[k].best, st.seconds, st.losses, st.model.get_state())
        )
    return reports


def build_models(cfg: TrainConfig, input_dim: int, num_classes: int, m: int) -> DomainModel | ModelEnsemble:
    if cfg.method_spec.ensemble:
        return ModelEnsemble.create(m, input_dim, cfg.feature_dim, num_classes, cfg.seeds_for(m), cfg.hidden)
    return init_model(input_dim, cfg.feature_dim, num_classes, cfg.seed, cfg.hidden)


def with_method(cfg: TrainConfig, method: str, **changes) -> TrainConfig:
    return replace(cfg, method=method, **changes)
