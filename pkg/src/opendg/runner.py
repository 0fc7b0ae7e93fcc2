"""Experiment orchestration: configs, leave-one-domain-out rotations, trials, CSV output."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from . import numerics as nx
from .datagen import (
    TIERS,
    ClassSpaceSpec,
    DomainDataset,
    DomainShiftSpec,
    Problem,
    build_class_space,
    generate_problem,
    load_dataset,
)
from .errors import ConfigError, FormatError
from .evaluation import EvalResult, calibrate_delta, evaluate, predict_class
from .losses import KernelSpec, coral_loss, mmd_loss
from .model import DomainModel, ModelEnsemble, ensemble_predict, save_models
from .train import (
    METHODS,
    TrainConfig,
    TrainReport,
    build_models,
    closed_set_accuracy,
    derive_seed,
    parse_method,
    train_ensemble,
    train_single,
)

log = logging.getLogger(__name__)

# Four synthetic domains; each one takes a turn as the target.
DEFAULT_DOMAINS: tuple[dict[str, Any], ...] = (
    {"name": "d0", "rotation_deg": 0.0, "scale": 1.0, "translation": [0.0, 0.0, 3.0, 0.0], "noise_std": 0.2},
    {"name": "d1", "rotation_deg": 10.0, "scale": 1.1, "translation": [0.0, 0.0, -3.0, 0.0], "noise_std": 0.2},
    {"name": "d2", "rotation_deg": -10.0, "scale": 0.9, "translation": [0.0, 0.0, 0.0, 3.0], "noise_std": 0.2},
    {"name": "d3", "rotation_deg": 20.0, "scale": 1.2, "translation": [0.0, 0.0, 0.0, -3.0], "noise_std": 0.2},
)


@dataclass(frozen=True)
class DomainEntry:
    name: str
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    path: str | None = None
    classes: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ProblemConfig:
    preset: str = "pacs_like"
    preset_params: dict = field(default_factory=dict)
    domains: tuple[DomainEntry, ...] = ()
    n_per_class: int = 40
    dim: int = 8
    radius: float = 4.0
    class_std: float = 1.0
    val_fraction: float = 0.2

    @property
    def file_based(self) -> bool:
        return any(d.path is not None for d in self.domains)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    methods: tuple[str, ...] = ("erm",)
    train: TrainConfig = field(default_factory=TrainConfig)
    trials: int = 1
    seed: int = 0
    out_dir: str = "results"
    delta: float | None = None  # None means calibrate on source validation
    delta_percentile: float = 5.0
    parallel: int = 1
    save_checkpoints: bool = False

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        for m in self.methods:
            parse_method(m)
        if self.delta is not None and not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.delta_percentile < 100:
            raise ConfigError("delta_percentile must lie strictly between 0 and 100")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if len(self.problem.domains) < 2:
            raise ConfigError("need at least two domains for leave-one-domain-out")


# --------------------------------------------------------------- config io


def _domain_from_dict(d: dict, k: int) -> DomainEntry:
    d = dict(d)
    unknown = set(d) - {"name", "rotation_deg", "scale", "translation", "noise_std", "path", "classes"}
    if unknown:
        raise ConfigError(f"domain {k}: unknown keys {sorted(unknown)}")
    shift = DomainShiftSpec(
        math.radians(float(d.get("rotation_deg", 0.0))),
        float(d.get("scale", 1.0)),
        tuple(float(v) for v in d.get("translation", ()) or ()),
        float(d.get("noise_std", 0.0)),
    )
    classes = d.get("classes")
    return DomainEntry(
        str(d.get("name", f"d{k}")),
        shift,
        str(d["path"]) if d.get("path") is not None else None,
        tuple(int(c) for c in classes) if classes is not None else None,
    )


def _train_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    if "kernel" in d:
        k = d["kernel"] or {}
        bw = k.get("bandwidths")
        d["kernel"] = KernelSpec(
            tuple(float(v) for v in bw) if bw else None,
            tuple(float(v) for v in k.get("factors", (0.5, 1.0, 2.0))),
            float(k.get("floor", 1e-6)),
        )
    for key in ("hidden", "member_seeds"):
        if d.get(key) is not None:
            d[key] = tuple(int(v) for v in d[key])
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    allowed = {"problem", "methods", "train", "trials", "seed", "out_dir", "delta", "delta_percentile", "parallel", "save_checkpoints"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    prob = dict(raw.get("problem") or {})
    p_allowed = {"preset", "preset_params", "domains", "n_per_class", "dim", "radius", "class_std", "val_fraction"}
    bad = set(prob) - p_allowed
    if bad:
        raise ConfigError(f"problem: unknown keys {sorted(bad)}")
    domains = prob.pop("domains", None) or list(DEFAULT_DOMAINS)
    problem = ProblemConfig(
        preset=str(prob.get("preset", "pacs_like")),
        preset_params=dict(prob.get("preset_params") or {}),
        domains=tuple(_domain_from_dict(d, k) for k, d in enumerate(domains)),
        n_per_class=int(prob.get("n_per_class", ProblemConfig.n_per_class)),
        dim=int(prob.get("dim", ProblemConfig.dim)),
        radius=float(prob.get("radius", ProblemConfig.radius)),
        class_std=float(prob.get("class_std", ProblemConfig.class_std)),
        val_fraction=float(prob.get("val_fraction", ProblemConfig.val_fraction)),
    )
    methods = raw.get("methods", ["erm"])
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    delta = raw.get("delta")
    if isinstance(delta, str) and delta.lower() in ("calibrate", "auto"):
        delta = None
    return ExperimentConfig(
        problem=problem,
        methods=tuple(str(m) for m in methods),
        train=_train_from_dict(raw.get("train") or {}),
        trials=int(raw.get("trials", 1)),
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "results")),
        delta=None if delta is None else float(delta),
        delta_percentile=float(raw.get("delta_percentile", 5.0)),
        parallel=int(raw.get("parallel", 1)),
        save_checkpoints=bool(raw.get("save_checkpoints", False)),
    )


def default_config(**overrides) -> ExperimentConfig:
    return dataclasses.replace(config_from_dict({}), **overrides)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(raw or {})
    # relative data paths resolve against the config file's directory
    domains = tuple(
        dataclasses.replace(d, path=str((path.parent / d.path).resolve())) if d.path and not Path(d.path).is_absolute() else d
        for d in cfg.problem.domains
    )
    return dataclasses.replace(cfg, problem=dataclasses.replace(cfg.problem, domains=domains))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain mapping with every field present; ``config_from_dict`` inverts it."""
    train = dataclasses.asdict(cfg.train)
    train["kernel"] = {
        "bandwidths": list(cfg.train.kernel.bandwidths) if cfg.train.kernel.bandwidths else None,
        "factors": list(cfg.train.kernel.factors),
        "floor": cfg.train.kernel.floor,
    }
    train["hidden"] = list(cfg.train.hidden)
    train["member_seeds"] = list(cfg.train.member_seeds) if cfg.train.member_seeds else None
    domains = []
    for d in cfg.problem.domains:
        entry: dict[str, Any] = {
            "name": d.name,
            "rotation_deg": math.degrees(d.shift.rotation),
            "scale": d.shift.scale,
            "translation": list(d.shift.translation),
            "noise_std": d.shift.noise_std,
        }
        if d.path is not None:
            entry["path"] = d.path
        if d.classes is not None:
            entry["classes"] = list(d.classes)
        domains.append(entry)
    p = cfg.problem
    return {
        "seed": cfg.seed,
        "trials": cfg.trials,
        "methods": list(cfg.methods),
        "out_dir": cfg.out_dir,
        "delta": cfg.delta if cfg.delta is not None else "calibrate",
        "delta_percentile": cfg.delta_percentile,
        "parallel": cfg.parallel,
        "save_checkpoints": cfg.save_checkpoints,
        "problem": {
            "preset": p.preset,
            "preset_params": dict(p.preset_params),
            "n_per_class": p.n_per_class,
            "dim": p.dim,
            "radius": p.radius,
            "class_std": p.class_std,
            "val_fraction": p.val_fraction,
            "domains": domains,
        },
        "train": train,
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# ---------------------------------------------------------------- records

RESULT_FIELDS = (
    "method", "trial", "target", "seed", "acc", "h_score", "acc_unknown",
    "tier_major", "tier_middle", "tier_minor", "source_acc",
    "seconds_per_epoch", "epochs_run", "delta", "val_coral", "val_mmd",
)
TIMING_FIELDS = ("seconds_per_epoch",)
_INT_FIELDS = {"trial", "seed", "epochs_run"}
_STR_FIELDS = {"method", "target"}


@dataclass(frozen=True)
class ResultRecord:
    method: str
    trial: int
    target: str
    seed: int
    acc: float
    h_score: float
    acc_unknown: float
    tier_major: float | None
    tier_middle: float | None
    tier_minor: float | None
    source_acc: float
    seconds_per_epoch: float
    epochs_run: int
    delta: float
    val_coral: float
    val_mmd: float

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.method, self.trial, self.target)

    def metrics(self) -> dict[str, Any]:
        """Every field except wall-clock timing."""
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in TIMING_FIELDS}


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, text: str) -> Any:
    if name in _STR_FIELDS:
        return text
    if name in _INT_FIELDS:
        return int(text)
    if text == "":
        return None
    return float(text)


def write_results(records: Sequence[ResultRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RESULT_FIELDS])


def read_results(path: str | Path) -> list[ResultRecord]:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RESULT_FIELDS:
        raise FormatError(f"{path}: header does not match {','.join(RESULT_FIELDS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(RESULT_FIELDS):
            raise FormatError(f"{path}:{lineno}: expected {len(RESULT_FIELDS)} fields, found {len(row)}")
        try:
            out.append(ResultRecord(**{f: _parse(f, v) for f, v in zip(RESULT_FIELDS, row)}))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


# ----------------------------------------------------------- problem setup


def rotation_problem(cfg: ExperimentConfig, target: int, data_seed: int) -> Problem:
    """Sources are every domain except ``target``, kept in config order."""
    p = cfg.problem
    order = [k for k in range(len(p.domains)) if k != target] + [target]
    names = [p.domains[k].name for k in order]
    if p.file_based:
        return _file_problem(cfg, order, data_seed)
    spec = build_class_space(p.preset, **p.preset_params)
    if spec.num_sources != len(order) - 1:
        raise ConfigError(
            f"preset {p.preset!r} has {spec.num_sources} sources but {len(order)} domains leave {len(order) - 1}"
        )
    shifts = [p.domains[k].shift for k in order]
    return generate_problem(
        spec, shifts, p.n_per_class, p.dim, data_seed,
        radius=p.radius, class_std=p.class_std, val_fraction=p.val_fraction, domain_names=names,
    )


def _restrict(ds: DomainDataset, classes: frozenset[int] | None) -> DomainDataset:
    if not classes:
        return ds
    keep = np.isin(ds.labels, sorted(classes))
    idx = np.flatnonzero(keep)
    remap = -np.ones(ds.n, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    train = remap[ds.train_idx[keep[ds.train_idx]]]
    val = remap[ds.val_idx[keep[ds.val_idx]]]
    return DomainDataset(ds.domain_id, ds.inputs[idx].copy(), ds.labels[idx].copy(), train, val, classes)


def _file_problem(cfg: ExperimentConfig, order: Sequence[int], data_seed: int) -> Problem:
    p = cfg.problem
    if any(d.path is None for d in p.domains):
        raise ConfigError("either every domain or none must name a data file")
    loaded = []
    for k in order:
        d = p.domains[k]
        ds = load_dataset(d.path, domain_id=d.name, val_fraction=p.val_fraction, seed=derive_seed(data_seed, "split", k))
        classes = frozenset(d.classes) if d.classes is not None else frozenset(np.unique(ds.labels).tolist())
        loaded.append(_restrict(ds, classes))
    sources, target = loaded[:-1], loaded[-1]
    known = frozenset().union(*(s.classes for s in sources))
    target_labels = frozenset(np.unique(target.labels).tolist())
    unknown = target_labels - known
    if not unknown:
        raise ConfigError(f"target domain {target.domain_id} has no classes outside the source classes")
    spec = ClassSpaceSpec(tuple(s.classes for s in sources), unknown)
    target = DomainDataset(target.domain_id, target.inputs, target.labels, target.train_idx, target.val_idx, target_labels)
    return Problem(spec, tuple(sources), target)


# ------------------------------------------------------------ one cell


def _members(trained: DomainModel | ModelEnsemble) -> list[DomainModel]:
    return trained.members if isinstance(trained, ModelEnsemble) else [trained]


def predict_proba(trained: DomainModel | ModelEnsemble, x: np.ndarray) -> np.ndarray:
    if isinstance(trained, ModelEnsemble):
        return ensemble_predict(trained, x)
    return trained.predict_proba(x)


def heldout_alignment(trained: DomainModel | ModelEnsemble, sources: Sequence[DomainDataset]) -> tuple[float, float]:
    """CORAL and MMD between per-domain validation features, averaged over members."""
    corals, mmds = [], []
    for member in _members(trained):
        feats = [nx.Tensor(member.extractor.forward_array(ds.validation()[0])) for ds in sources]
        corals.append(coral_loss(feats).item())
        mmds.append(mmd_loss(feats, KernelSpec()).item())
    return float(np.mean(corals)), float(np.mean(mmds))


def _seconds_per_epoch(reports: Sequence[TrainReport]) -> float:
    # serial ensemble epochs cost the sum of the member epochs
    return float(sum(r.mean_epoch_seconds for r in reports))


def run_cell(cfg: ExperimentConfig, method: str, trial: int, target: int) -> ResultRecord:
    data_seed = derive_seed(cfg.seed, "data", trial, target)
    train_seed = derive_seed(cfg.seed, "train", trial, target)
    problem = rotation_problem(cfg, target, data_seed)
    spec = problem.spec
    tcfg = dataclasses.replace(cfg.train, method=method, seed=train_seed, member_seeds=None)
    trained = build_models(tcfg, problem.target.dim, spec.num_known, spec.num_sources)
    if isinstance(trained, ModelEnsemble):
        reports = train_ensemble(trained, problem.sources, spec, tcfg)
    else:
        reports = [train_single(trained, problem.sources, spec, tcfg)]

    xs = np.vstack([ds.validation()[0] for ds in problem.sources])
    cols = np.concatenate([[spec.column(int(v)) for v in ds.validation()[1]] for ds in problem.sources]).astype(np.int64)
    val_probs = predict_proba(trained, xs)
    if cfg.delta is None:
        delta = calibrate_delta(val_probs, cfg.delta_percentile)
    else:
        delta = cfg.delta
    pred = predict_class(predict_proba(trained, problem.target.inputs), delta, spec.known)
    result: EvalResult = evaluate(pred, problem.target.labels, spec, delta)
    v_coral, v_mmd = heldout_alignment(trained, problem.sources)

    if cfg.save_checkpoints:
        ckpt = Path(cfg.out_dir) / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
        save_models(ckpt / f"{method}_t{trial}_{problem.target.domain_id}.npz", _members(trained))

    return ResultRecord(
        method=method,
        trial=trial,
        target=problem.target.domain_id,
        seed=train_seed,
        acc=result.acc_known,
        h_score=result.h_score,
        acc_unknown=result.acc_unknown_detect,
        tier_major=result.tier_acc["major"],
        tier_middle=result.tier_acc["middle"],
        tier_minor=result.tier_acc["minor"],
        source_acc=closed_set_accuracy(val_probs, cols),
        seconds_per_epoch=_seconds_per_epoch(reports),
        epochs_run=max(r.epochs_run for r in reports),
        delta=float(delta),
        val_coral=v_coral,
        val_mmd=v_mmd,
    )


def _cell_job(args) -> ResultRecord:
    cfg, method, trial, target = args
    return run_cell(cfg, method, trial, target)


def run_experiment(cfg: ExperimentConfig, *, write: bool = True) -> list[ResultRecord]:
    """Every (method, trial, target rotation) cell, sorted by method order, trial and target."""
    out = Path(cfg.out_dir)
    if write or cfg.save_checkpoints:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from None
    # methods interleave so slow drift in machine speed hits every method alike
    jobs = [
        (cfg, method, trial, target)
        for trial in range(cfg.trials)
        for target in range(len(cfg.problem.domains))
        for method in cfg.methods
    ]
    if cfg.parallel > 1:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn")
        with ProcessPoolExecutor(max_workers=cfg.parallel, mp_context=ctx) as pool:
            records = list(pool.map(_cell_job, jobs))
    else:
        records = []
        for job in jobs:
            t0 = time.perf_counter()
            records.append(_cell_job(job))
            log.info("%s trial %d target %s done in %.1fs", job[1], job[2], records[-1].target, time.perf_counter() - t0)
    order = {m: k for k, m in enumerate(cfg.methods)}
    names = [d.name for d in cfg.problem.domains]
    records.sort(key=lambda r: (order[r.method], r.trial, names.index(r.target) if r.target in names else 0))
    if write:
        (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
        report(records, out)
    return records


# ---------------------------------------------------------------- summary

SUMMARY_METRICS = ("acc", "h_score", "acc_unknown", "tier_major", "tier_middle", "tier_minor", "source_acc", "seconds_per_epoch")
AVERAGE = "avg"


@dataclass(frozen=True)
class SummaryRow:
    method: str
    target: str
    n: int
    means: dict[str, float | None]
    stds: dict[str, float | None]


def _mean_std(values: Iterable[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std: 0 for a single trial


def _ordered_unique(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for it in items:
        seen.setdefault(it, None)
    return list(seen)


def summarize(records: Sequence[ResultRecord]) -> list[SummaryRow]:
    """Mean and std across trials per (method, target), plus an across-target average row.

    The average row's mean is the mean of the per-target means; its std is
    taken over trials of each trial's across-target average.
    """
    if not records:
        raise ConfigError("no records to summarize")
    rows = []
    for method in _ordered_unique(r.method for r in records):
        mine = [r for r in records if r.method == method]
        targets = _ordered_unique(r.target for r in mine)
        for target in targets:
            cell = [r for r in mine if r.target == target]
            means, stds = {}, {}
            for metric in SUMMARY_METRICS:
                means[metric], stds[metric] = _mean_std(getattr(r, metric) for r in cell)
            rows.append(SummaryRow(method, target, len(cell), means, stds))
        per_target = [row for row in rows if row.method == method]
        means, stds = {}, {}
        trials = _ordered_unique(str(r.trial) for r in mine)
        for metric in SUMMARY_METRICS:
            means[metric], _ = _mean_std(row.means[metric] for row in per_target)
            trial_avgs = []
            for t in trials:
                vals = [getattr(r, metric) for r in mine if str(r.trial) == t]
                trial_avgs.append(_mean_std(vals)[0])
            stds[metric] = _mean_std(trial_avgs)[1]
        rows.append(SummaryRow(method, AVERAGE, len(mine), means, stds))
    return rows


def write_summary(rows: Sequence[SummaryRow], path: str | Path) -> None:
    header = ["method", "target", "n"]
    for metric in SUMMARY_METRICS:
        header += [f"{metric}_mean", f"{metric}_std"]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            line = [row.method, row.target, str(row.n)]
            for metric in SUMMARY_METRICS:
                line += [_fmt(row.means[metric]), _fmt(row.stds[metric])]
            w.writerow(line)


def rank_markers(values: Sequence[float | None], higher_is_better: bool = True) -> list[str]:
    """'best' / 'second' / '' for each entry; ties resolve to the earlier row."""
    present = [(v, k) for k, v in enumerate(values) if v is not None]
    present.sort(key=lambda t: (-t[0] if higher_is_better else t[0], t[1]))
    marks = [""] * len(values)
    if present:
        marks[present[0][1]] = "best"
    if len(present) > 1:
        marks[present[1][1]] = "second"
    return marks


def _decorate(text: str, mark: str) -> str:
    if mark == "best":
        return f"**{text}**"
    if mark == "second":
        return f"_{text}_"
    return text


def format_table(rows: Sequence[SummaryRow]) -> str:
    """Methods as rows; Acc and H-score per target, then averages, source accuracy and epoch time."""
    methods = _ordered_unique(r.method for r in rows)
    targets = [t for t in _ordered_unique(r.target for r in rows) if t != AVERAGE] + [AVERAGE]
    lookup = {(r.method, r.target): r for r in rows}
    columns: list[tuple[str, str, str, bool]] = []
    for t in targets:
        columns += [(f"{t} acc", t, "acc", True), (f"{t} H", t, "h_score", True)]
    columns += [("source acc", AVERAGE, "source_acc", True), ("s/epoch", AVERAGE, "seconds_per_epoch", False)]

    cells: list[list[str]] = []
    grid_marks = []
    for title, target, metric, higher in columns:
        vals = [lookup[(m, target)].means[metric] if (m, target) in lookup else None for m in methods]
        grid_marks.append(rank_markers(vals, higher))
    for i, m in enumerate(methods):
        line = [m]
        for c, (title, target, metric, _) in enumerate(columns):
            row = lookup.get((m, target))
            v = row.means[metric] if row else None
            if v is None:
                line.append("-")
                continue
            digits = 4 if metric == "seconds_per_epoch" else 3
            line.append(_decorate(f"{v:.{digits}f}", grid_marks[c][i]))
        cells.append(line)
    header = ["method"] + [c[0] for c in columns]
    widths = [max(len(header[k]), *(len(r[k]) for r in cells)) for k in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    for r in cells:
        out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(out)


def time_epochs(records: Sequence[ResultRecord]) -> dict[str, float]:
    """Mean seconds per epoch per method over every rotation and trial."""
    out: dict[str, float] = {}
    for method in _ordered_unique(r.method for r in records):
        out[method] = float(np.mean([r.seconds_per_epoch for r in records if r.method == method]))
    return out


def report(records: Sequence[ResultRecord], out_dir: str | Path | None = None) -> str:
    """Write results.csv and summary.csv into ``out_dir`` (when given) and return the text table."""
    if not records:
        raise ConfigError("report needs at least one record")
    rows = summarize(records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(records, out / "results.csv")
        write_summary(rows, out / "summary.csv")
    return format_table(rows)


def demo_config(seed: int = 0, out_dir: str = "demo_results") -> ExperimentConfig:
    """Quick pacs_like run over the single-model and plain ensemble methods."""
    base = default_config()
    return dataclasses.replace(
        base,
        methods=("erm", "coral", "mmd", "e_coral", "e_mmd"),
        trials=1,
        seed=seed,
        out_dir=out_dir,
        train=dataclasses.replace(base.train, max_epochs=30),
    )


__all__ = [
    "DEFAULT_DOMAINS", "METHODS", "TIERS", "DomainEntry", "ExperimentConfig", "ProblemConfig",
    "ResultRecord", "SummaryRow", "config_from_dict", "default_config", "demo_config", "dump_config",
    "format_table", "heldout_alignment", "load_config", "rank_markers", "read_results", "report",
    "rotation_problem", "run_cell", "run_experiment", "summarize", "time_epochs", "write_results",
]
