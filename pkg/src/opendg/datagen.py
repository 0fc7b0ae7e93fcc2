"""Open-domain class spaces, synthetic multi-domain problems and dataset I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, ParseError, PreconditionError, ValidationError

TIERS = ("major", "middle", "minor")


@dataclass(frozen=True)
class ClassSpaceSpec:
    """Per-source label sets plus the target's unknown-only labels."""

    source_classes: tuple[frozenset[int], ...]
    target_unknown: frozenset[int]

    def __post_init__(self) -> None:
        if not self.source_classes:
            raise ValidationError("at least one source label set is required")
        if any(not s for s in self.source_classes):
            raise ValidationError("source label sets must be non-empty")
        if not self.target_unknown:
            raise ValidationError("the unknown label set must be non-empty")
        overlap = self.target_unknown & self.known_set
        if overlap:
            raise ValidationError(f"unknown labels {sorted(overlap)} also appear in source domains")

    @property
    def num_sources(self) -> int:
        return len(self.source_classes)

    @property
    def known_set(self) -> frozenset[int]:
        return frozenset().union(*self.source_classes)

    @property
    def known(self) -> tuple[int, ...]:
        """Known labels in sorted order; position = classifier column."""
        return tuple(sorted(self.known_set))

    @property
    def unknown(self) -> tuple[int, ...]:
        return tuple(sorted(self.target_unknown))

    @property
    def target_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.known_set | self.target_unknown))

    @property
    def num_known(self) -> int:
        return len(self.known_set)

    def column(self, label: int) -> int:
        return self.known.index(label)

    def tier_of(self, label: int) -> str:
        count = sum(label in s for s in self.source_classes)
        if count == 0:
            raise ValidationError(f"label {label} is not a known class")
        if count >= 3:
            return "major"
        return "middle" if count == 2 else "minor"

    def tiers(self) -> dict[str, frozenset[int]]:
        out: dict[str, set[int]] = {t: set() for t in TIERS}
        for label in self.known:
            out[self.tier_of(label)].add(label)
        return {t: frozenset(v) for t, v in out.items()}


def build_class_space(preset: str = "pacs_like", **params) -> ClassSpaceSpec:
    """Build one of the open-domain class layouts.

    ``officehome_like`` takes ``major``, ``middle``, ``minor`` and ``unknown``
    counts: ``major`` classes shared by all three sources, ``middle`` classes
    for each source pair, ``minor`` classes per single source and ``unknown``
    target-only classes. ``custom`` takes ``sources`` and ``unknown``.
    """
    if preset == "pacs_like":
        return ClassSpaceSpec(
            (frozenset({0, 1, 3}), frozenset({0, 2, 4}), frozenset({1, 2, 5})),
            frozenset({6}),
        )
    if preset == "officehome_like":
        a = int(params.get("major", 1))
        b = int(params.get("middle", 1))
        c = int(params.get("minor", 1))
        u = int(params.get("unknown", 1))
        if min(a, b, c) < 0 or u < 1:
            raise ValidationError("tier counts must be non-negative and unknown >= 1")
        nxt = 0

        def take(k: int) -> set[int]:
            nonlocal nxt
            block = set(range(nxt, nxt + k))
            nxt += k
            return block

        sources: list[set[int]] = [set(), set(), set()]
        shared = take(a)
        for s in sources:
            s |= shared
        for p, q in ((0, 1), (0, 2), (1, 2)):
            pair = take(b)
            sources[p] |= pair
            sources[q] |= pair
        for s in sources:
            s |= take(c)
        unknown = take(u)
        return ClassSpaceSpec(tuple(frozenset(s) for s in sources), frozenset(unknown))
    if preset == "custom":
        sources = params.get("sources")
        unknown = params.get("unknown")
        if not sources or unknown is None:
            raise ValidationError("custom class space needs 'sources' and 'unknown'")
        return ClassSpaceSpec(
            tuple(frozenset(int(v) for v in s) for s in sources),
            frozenset(int(v) for v in unknown),
        )
    raise ValidationError(f"unknown class-space preset {preset!r}")


@dataclass(frozen=True)
class DomainShiftSpec:
    """Affine shift ``x -> scale * R(rotation) x + translation`` plus noise.

    The rotation acts on the first two coordinates only.
    """

    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple[float, ...] = ()
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not self.noise_std >= 0:
            raise ValidationError(f"noise_std must be non-negative, got {self.noise_std}")

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = x.copy()
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x0, x1 = x[:, 0].copy(), x[:, 1].copy()
        out[:, 0] = c * x0 - s * x1
        out[:, 1] = s * x0 + c * x1
        out *= self.scale
        if self.translation:
            t = np.zeros(x.shape[1])
            t[: len(self.translation)] = self.translation[: x.shape[1]]
            out += t
        if self.noise_std > 0:
            out += rng.normal(0.0, self.noise_std, size=out.shape)
        return out


IDENTITY_SHIFT = DomainShiftSpec()


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain_id: str
    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    classes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        n = self.inputs.shape[0]
        if self.labels.shape != (n,):
            raise FormatError(f"{n} input rows but labels have shape {self.labels.shape}")
        if np.intersect1d(self.train_idx, self.val_idx).size:
            raise ValidationError("train and validation splits overlap")
        covered = np.union1d(self.train_idx, self.val_idx)
        if covered.size != n or (n and (covered[0] != 0 or covered[-1] != n - 1)):
            raise ValidationError("train and validation splits must cover every index")
        if self.classes:
            bad = set(np.unique(self.labels).tolist()) - self.classes
            if bad:
                raise ValidationError(f"domain {self.domain_id}: labels {sorted(bad)} outside its class set")
        for arr in (self.inputs, self.labels, self.train_idx, self.val_idx):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.train_idx], self.labels[self.train_idx]

    def validation(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.val_idx], self.labels[self.val_idx]


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= val_fraction < 1:
        raise ValidationError(f"validation fraction must lie in [0, 1), got {val_fraction}")
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass(frozen=True)
class Problem:
    spec: ClassSpaceSpec
    sources: tuple[DomainDataset, ...]
    target: DomainDataset


def prototypes(num_classes: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Class means evenly spaced on a circle (random phase) in the first two coordinates."""
    phase = rng.uniform(0.0, 2 * math.pi)
    angles = phase + 2 * math.pi * np.arange(num_classes) / num_classes
    protos = np.zeros((num_classes, dim))
    protos[:, 0] = radius * np.cos(angles)
    protos[:, 1] = radius * np.sin(angles)
    return protos


def generate_problem(
    spec: ClassSpaceSpec,
    shifts: Sequence[DomainShiftSpec],
    n_per_class: int,
    dim: int,
    seed: int,
    *,
    radius: float = 4.0,
    class_std: float = 1.0,
    val_fraction: float = 0.2,
    domain_names: Sequence[str] | None = None,
) -> Problem:
    """Draw M source domains and one target domain; ``shifts`` lists sources then target."""
    if dim < 2:
        raise PreconditionError(f"dim must be >= 2, got {dim}")
    if n_per_class < 4:
        raise PreconditionError(f"n_per_class must be >= 4, got {n_per_class}")
    m = spec.num_sources
    if len(shifts) != m + 1:
        raise PreconditionError(f"expected {m + 1} domain shifts, got {len(shifts)}")
    names = list(domain_names) if domain_names else [f"source{k + 1}" for k in range(m)] + ["target"]

    rng = np.random.default_rng(seed)
    all_labels = spec.target_classes
    protos = prototypes(len(all_labels), dim, radius, rng)
    row_of = {label: k for k, label in enumerate(all_labels)}

    class_sets = list(spec.source_classes) + [frozenset(all_labels)]
    domains = []
    for k, (classes, shift) in enumerate(zip(class_sets, shifts)):
        labels = np.repeat(np.array(sorted(classes), dtype=np.int64), n_per_class)
        means = protos[[row_of[int(y)] for y in labels]]
        raw = means + rng.normal(0.0, class_std, size=means.shape)
        x = shift.apply(raw, rng)
        train_idx, val_idx = split_indices(len(labels), val_fraction, rng)
        domains.append(DomainDataset(names[k], x, labels, train_idx, val_idx, frozenset(classes)))
    return Problem(spec, tuple(domains[:m]), domains[m])


# ------------------------------------------------------------------ batches


def one_hot(labels: np.ndarray, spec: ClassSpaceSpec) -> np.ndarray:
    known = spec.known
    out = np.zeros((len(labels), len(known)))
    lookup = {label: k for k, label in enumerate(known)}
    for r, y in enumerate(labels):
        try:
            out[r, lookup[int(y)]] = 1.0
        except KeyError:
            raise ValidationError(f"label {int(y)} is not in the known class space") from None
    return out


@dataclass
class Batch:
    inputs: np.ndarray
    one_hot: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)

    def truncate(self, n: int) -> "Batch":
        return Batch(self.inputs[:n], self.one_hot[:n], self.labels[:n], self.indices[:n])


class BatchSampler:
    """Endless stream of training batches, reshuffled at each pass over the split.

    The last batch of a pass holds the remainder and may be short.
    """

    def __init__(self, ds: DomainDataset, spec: ClassSpaceSpec, batch_size: int, rng: np.random.Generator) -> None:
        if ds.train_idx.size == 0:
            raise PreconditionError(f"domain {ds.domain_id} has an empty train split")
        if batch_size < 1:
            raise PreconditionError("batch_size must be >= 1")
        self.ds = ds
        self.spec = spec
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.passes = 0

    def __getstate__(self):
        state = self.__dict__.copy()
        state["ds"] = None  # datasets are shipped to workers once, not per task
        return state

    def attach(self, ds: DomainDataset) -> None:
        self.ds = ds

    @property
    def steps_per_pass(self) -> int:
        return math.ceil(self.ds.train_idx.size / self.batch_size)

    def next(self) -> Batch:
        if self._cursor >= self._order.size:
            self._order = self.rng.permutation(self.ds.train_idx)
            self._cursor = 0
            self.passes += 1
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += idx.size
        labels = self.ds.labels[idx]
        return Batch(self.ds.inputs[idx], one_hot(labels, self.spec), labels, idx)

    def epoch(self) -> Iterator[Batch]:
        """Yield the batches of one fresh pass over the train split."""
        self._cursor = self._order.size
        for _ in range(self.steps_per_pass):
            yield self.next()


def sample_batch(ds: DomainDataset, spec: ClassSpaceSpec, batch_size: int, rng: np.random.Generator) -> Batch:
    """One without-replacement batch from a fresh shuffle of the train split."""
    return BatchSampler(ds, spec, batch_size, rng).next()


# --------------------------------------------------------------- flat files


def load_dataset(
    path: str | Path,
    *,
    domain_id: str | None = None,
    val_fraction: float = 0.2,
    seed: int = 0,
    classes: Sequence[int] | None = None,
    delimiter: str = ",",
) -> DomainDataset:
    """Read ``label,feat_1,...,feat_d`` rows; ``#`` lines and blank lines are skipped."""
    path = Path(path)
    labels: list[int] = []
    rows: list[list[float]] = []
    width: int | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in text.split(delimiter)]
            if len(fields) < 2:
                raise FormatError(f"{path}:{lineno}: expected a label and at least one feature")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} fields, found {len(fields)}")
            try:
                label_f = float(fields[0])
                feats = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})", line=lineno) from None
            if not label_f.is_integer():
                raise ParseError(f"{path}:{lineno}: label {fields[0]!r} is not an integer", line=lineno)
            labels.append(int(label_f))
            rows.append(feats)
    if not rows:
        raise FormatError(f"{path}: no samples")
    x = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    train_idx, val_idx = split_indices(len(y), val_fraction, np.random.default_rng(seed))
    return DomainDataset(
        domain_id or path.stem,
        x,
        y,
        train_idx,
        val_idx,
        frozenset(classes) if classes is not None else frozenset(),
    )


def write_dataset(ds: DomainDataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for y, row in zip(ds.labels, ds.inputs):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")
