"""Cross-entropy, CORAL and MMD alignment terms, Dir-mixup and distilled labels,
and the per-member ensemble objectives built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, PreconditionError
from .model import DomainModel, ModelEnsemble
from .numerics import Tensor

REGULARIZERS = ("coral", "mmd", "none")


class LabeledBatch(Protocol):
    inputs: np.ndarray
    one_hot: np.ndarray


@dataclass(frozen=True)
class DirichletParams:
    alpha: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.alpha:
            raise PreconditionError("Dirichlet parameters must be non-empty")
        if any(not a > 0 for a in self.alpha):
            raise PreconditionError(f"Dirichlet parameters must be positive, got {self.alpha}")

    @classmethod
    def peaked(cls, i: int, m: int, own: float = 0.6, other: float = 0.2) -> "DirichletParams":
        """``own`` on coordinate ``i``, ``other`` elsewhere."""
        return cls(tuple(own if k == i else other for k in range(m)))

    @classmethod
    def flat(cls, k: int, value: float = 1.0) -> "DirichletParams":
        return cls((value,) * k)

    @property
    def mean(self) -> np.ndarray:
        a = np.array(self.alpha)
        return a / a.sum()


@dataclass(frozen=True)
class LossWeights:
    """Per-domain cross-entropy weights plus regularizer / distillation settings.

    ``extra_weight`` scales the Dir-mixup or distillation term added on top of
    the ensemble loss.
    """

    w: tuple[float, ...]
    gamma: float = 1.0
    distill_temperature: float = 2.0
    extra_weight: float = 1.0

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.w):
            raise ConfigError(f"domain weights must be non-negative, got {self.w}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if not self.distill_temperature > 0:
            raise ConfigError("distillation temperature must be positive")

    @classmethod
    def for_member(cls, i: int, m: int, own: float = 3.0, other: float = 1.0, **kw) -> "LossWeights":
        return cls(tuple(own if j == i else other for j in range(m)), **kw)


@dataclass(frozen=True)
class KernelSpec:
    """Sum of Gaussian kernels ``exp(-d^2 / (2 s))`` over bandwidths ``s``.

    With ``bandwidths`` unset, ``s = median pairwise squared distance * factor``
    for each factor, computed on the joint batch. The median stays differentiable.
    """

    bandwidths: tuple[float, ...] | None = None
    factors: tuple[float, ...] = (0.5, 1.0, 2.0)
    floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.bandwidths is not None and any(not b > 0 for b in self.bandwidths):
            raise ConfigError(f"kernel bandwidths must be positive, got {self.bandwidths}")
        if any(not f > 0 for f in self.factors):
            raise ConfigError(f"bandwidth factors must be positive, got {self.factors}")
        if not self.floor > 0:
            raise ConfigError("bandwidth floor must be positive")

    def resolve(self, a: Tensor, b: Tensor) -> list[Tensor]:
        """Bandwidths for the pair (a, b) as 1x1 tensors."""
        if self.bandwidths is not None:
            return [Tensor(s) for s in self.bandwidths]
        return self.resolve_blocks(pairwise_sq_dists(a, a), pairwise_sq_dists(b, b), pairwise_sq_dists(a, b))

    def resolve_blocks(self, d_aa: Tensor, d_bb: Tensor, d_ab: Tensor) -> list[Tensor]:
        """Bandwidths from the three distance blocks of the joint batch.

        The distinct pairs of the joint batch are the strict upper triangles
        of the two self blocks plus every cross entry. The median is one of
        those distances (or the mean of two), so it stays in the graph and
        the loss gradient accounts for it.
        """
        if self.bandwidths is not None:
            return [Tensor(s) for s in self.bandwidths]
        blocks = []
        for k, (d, upper) in enumerate(((d_aa, True), (d_bb, True), (d_ab, False))):
            if upper:
                r, c = np.triu_indices(d.rows, k=1)
            else:
                r, c = (g.ravel() for g in np.indices(d.shape))
            blocks.append((np.full(r.size, k), r, c, d.values[r, c]))
        which, rows, cols, vals = (np.concatenate(parts) for parts in zip(*blocks))
        if vals.size == 0:
            base = Tensor(self.floor)
        else:
            order = np.argsort(vals, kind="stable")
            mid = vals.size // 2
            picks = [order[mid]] if vals.size % 2 else [order[mid - 1], order[mid]]
            source = (d_aa, d_bb, d_ab)
            parts = [nx.pick(source[which[k]], int(rows[k]), int(cols[k])) for k in picks]
            base = parts[0] if len(parts) == 1 else nx.scale(nx.add(parts[0], parts[1]), 0.5)
            if base.item() < self.floor:
                base = Tensor(self.floor)
        return [nx.scale(base, f) for f in self.factors]


# -------------------------------------------------------------- primitives


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cross_entropy(targets, logits: Tensor) -> Tensor:
    """Mean over rows of ``-sum_c y_c log softmax(logits)_c``; targets may be soft."""
    y = _const(targets)
    if y.shape != logits.shape:
        raise DimensionError(f"cross_entropy: targets {y.shape} vs logits {logits.shape}")
    logp = nx.log(nx.softmax_rows(logits))
    return nx.scale(nx.tsum(nx.mul(y, logp)), -1.0 / logits.rows)


def covariance(z: Tensor) -> Tensor:
    """Unbiased sample covariance of the rows of ``z``."""
    if z.rows < 2:
        raise PreconditionError(f"covariance needs at least 2 samples, got {z.rows}")
    centered = nx.sub(z, nx.row_mean(z))
    return nx.scale(nx.matmul(nx.transpose(centered), centered), 1.0 / (z.rows - 1))


def _check_widths(features: Sequence[Tensor], op: str) -> None:
    if not features:
        raise PreconditionError(f"{op} needs at least one feature batch")
    widths = {z.cols for z in features}
    if len(widths) != 1:
        raise DimensionError(f"{op}: feature widths differ {[z.shape for z in features]}")


def _pairwise_mean(m: int, pair_term) -> Tensor:
    # the (i, j) and (j, i) terms are equal and i == j terms vanish
    total: Tensor | None = None
    for i in range(m):
        for j in range(i + 1, m):
            term = pair_term(i, j)
            total = term if total is None else nx.add(total, term)
    if total is None:
        return Tensor(0.0)
    return nx.scale(total, 2.0 / (m * m))


def coral_loss(features: Sequence[Tensor]) -> Tensor:
    """Mean over ordered domain pairs of the squared Frobenius gap between covariances."""
    _check_widths(features, "coral_loss")
    covs = [covariance(z) for z in features]

    def term(i: int, j: int) -> Tensor:
        diff = nx.sub(covs[i], covs[j])
        return nx.tsum(nx.mul(diff, diff))

    return _pairwise_mean(len(features), term)


def pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    ones = Tensor(np.ones((a.cols, 1)))
    aa = nx.matmul(nx.mul(a, a), ones)
    bb = nx.matmul(nx.mul(b, b), ones)
    cross = nx.matmul(a, nx.transpose(b))
    return nx.relu(nx.add(nx.add(aa, nx.transpose(bb)), nx.scale(cross, -2.0)))


def _kernel_mean(d: Tensor, coefs: Sequence[Tensor]) -> Tensor:
    k: Tensor | None = None
    for c in coefs:
        term = nx.exp(nx.mul(d, c))
        k = term if k is None else nx.add(k, term)
    return nx.mean(k)


def mmd2(
    a: Tensor,
    b: Tensor,
    kernel: KernelSpec | None = None,
    *,
    d_aa: Tensor | None = None,
    d_bb: Tensor | None = None,
) -> Tensor:
    """Biased (V-statistic) squared MMD between two feature batches.

    ``d_aa`` / ``d_bb`` let callers reuse self-distance blocks across pairs.
    """
    kernel = kernel or KernelSpec()
    d_aa = d_aa if d_aa is not None else pairwise_sq_dists(a, a)
    d_bb = d_bb if d_bb is not None else pairwise_sq_dists(b, b)
    d_ab = pairwise_sq_dists(a, b)
    coefs = [nx.scale(nx.reciprocal(s), -0.5) for s in kernel.resolve_blocks(d_aa, d_bb, d_ab)]
    kaa = _kernel_mean(d_aa, coefs)
    kbb = _kernel_mean(d_bb, coefs)
    kab = _kernel_mean(d_ab, coefs)
    return nx.sub(nx.add(kaa, kbb), nx.scale(kab, 2.0))


def mmd_loss(features: Sequence[Tensor], kernel: KernelSpec | None = None) -> Tensor:
    _check_widths(features, "mmd_loss")
    if any(z.rows < 1 for z in features):
        raise PreconditionError("mmd_loss needs non-empty batches")
    kernel = kernel or KernelSpec()
    if len(features) < 2:
        return Tensor(0.0)
    selfd = [pairwise_sq_dists(z, z) for z in features]
    return _pairwise_mean(
        len(features),
        lambda i, j: mmd2(features[i], features[j], kernel, d_aa=selfd[i], d_bb=selfd[j]),
    )


def regularizer(kind: str, features: Sequence[Tensor], kernel: KernelSpec | None = None) -> Tensor | None:
    if kind == "coral":
        return coral_loss(features)
    if kind == "mmd":
        return mmd_loss(features, kernel)
    if kind == "none":
        return None
    raise ConfigError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")


# ----------------------------------------------------------------- Dirichlet


def sample_gamma(shape: float, rng: np.random.Generator) -> float:
    """log of a Gamma(shape, 1) draw.

    Marsaglia-Tsang squeeze/rejection for shape >= 1; smaller shapes draw
    Gamma(shape + 1) and multiply by U**(1/shape). Working in log space keeps
    tiny shapes from underflowing to zero.
    """
    if not shape > 0:
        raise PreconditionError(f"gamma shape must be positive, got {shape}")
    boost = 0.0
    if shape < 1.0:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        boost = math.log(u) / shape
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x**4:
            return math.log(d * v) + boost
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d * v) + boost


def sample_dirichlet(params: DirichletParams, rng: np.random.Generator) -> np.ndarray:
    """Point on the simplex from normalized Gamma draws."""
    logs = np.array([sample_gamma(a, rng) for a in params.alpha])
    w = np.exp(logs - logs.max())
    return w / w.sum()


# ---------------------------------------------------- mixup and distillation


def dir_mixup(features: Sequence[Tensor], labels: Sequence[np.ndarray], lam) -> tuple[Tensor, np.ndarray]:
    """Convex combination ``sum_k lam_k z_k`` of features and of labels."""
    lam = np.asarray(lam, dtype=np.float64).ravel()
    m = len(features)
    if lam.size != m or len(labels) != m:
        raise DimensionError(f"dir_mixup: {m} feature batches, {len(labels)} label batches, {lam.size} weights")
    shapes = {z.shape for z in features}
    label_shapes = {np.shape(y) for y in labels}
    if len(shapes) != 1 or len(label_shapes) != 1:
        raise DimensionError(f"dir_mixup: batches differ in shape {sorted(shapes)} / {sorted(label_shapes)}")
    z_mix: Tensor | None = None
    y_mix = np.zeros(np.shape(labels[0]))
    for k in range(m):
        term = nx.scale(features[k], lam[k])
        z_mix = term if z_mix is None else nx.add(z_mix, term)
        y_mix = y_mix + lam[k] * np.asarray(labels[k])
    return z_mix, y_mix


def distill_label(peers: Sequence[DomainModel], x: np.ndarray, lam, temperature: float = 2.0) -> np.ndarray:
    """Weighted sum of the peers' tempered softmax outputs on ``x``; carries no gradient."""
    lam = np.asarray(lam, dtype=np.float64).ravel()
    if lam.size != len(peers):
        raise DimensionError(f"distill_label: {len(peers)} peers but {lam.size} weights")
    out = np.zeros((x.shape[0], peers[0].num_classes))
    for weight, peer in zip(lam, peers):
        out = out + weight * peer.predict_proba(x, temperature)
    return out


# -------------------------------------------------------- member objectives


@dataclass
class MemberPass:
    """Forward quantities for member i on every domain batch."""

    features: list[Tensor]
    logits: list[Tensor]
    ce_terms: list[Tensor]
    reg: Tensor | None
    base: Tensor
    extra: Tensor | None = None
    lam: np.ndarray | None = None
    total: Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.total = self.base


def _member_pass(
    model: DomainModel,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str,
    kernel: KernelSpec | None,
) -> MemberPass:
    if len(weights.w) != len(batches):
        raise DimensionError(f"{len(batches)} domain batches but {len(weights.w)} domain weights")
    if reg not in REGULARIZERS:
        raise ConfigError(f"unknown regularizer {reg!r}; expected one of {REGULARIZERS}")
    feats = [model.features(b.inputs) for b in batches]
    logits = [model.logits_from_features(z) for z in feats]
    ces = [cross_entropy(b.one_hot, lg) for b, lg in zip(batches, logits)]
    total: Tensor | None = None
    for wj, ce in zip(weights.w, ces):
        term = nx.scale(ce, wj)
        total = term if total is None else nx.add(total, term)
    reg_term = regularizer(reg, feats, kernel)
    if reg_term is not None:
        total = nx.add(total, nx.scale(reg_term, weights.gamma))
    return MemberPass(feats, logits, ces, reg_term, total)


def ensemble_loss(
    i: int,
    e: ModelEnsemble,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str = "coral",
    kernel: KernelSpec | None = None,
) -> Tensor:
    """``sum_j w_j ce(y_j, M_i(x_j)) + gamma * reg(F_i(x_1..x_M))``."""
    return _member_pass(e[i], batches, weights, reg, kernel).total


def truncate_batches(batches: Sequence[LabeledBatch]) -> list[LabeledBatch]:
    n = min(b.inputs.shape[0] for b in batches)
    out = []
    for b in batches:
        if b.inputs.shape[0] == n:
            out.append(b)
        elif hasattr(b, "truncate"):
            out.append(b.truncate(n))
        else:
            out.append(_Plain(b.inputs[:n], b.one_hot[:n]))
    return out


@dataclass
class _Plain:
    inputs: np.ndarray
    one_hot: np.ndarray


def dir_pass(
    i: int,
    e: ModelEnsemble,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str,
    rng: np.random.Generator,
    *,
    alpha: DirichletParams | None = None,
    kernel: KernelSpec | None = None,
    peers: Sequence[DomainModel] | None = None,
    mixup_features: str = "peer",
    lam=None,
) -> MemberPass:
    batches = truncate_batches(batches)
    m = len(batches)
    p = _member_pass(e[i], batches, weights, reg, kernel)
    if lam is None:
        lam = sample_dirichlet(alpha or DirichletParams.peaked(i, m), rng)
    lam = np.asarray(lam, dtype=np.float64)
    if mixup_features == "peer":
        source = peers if peers is not None else e.members
        zs = [
            p.features[k] if k == i else Tensor(source[k].extractor.forward_array(batches[k].inputs))
            for k in range(m)
        ]
    elif mixup_features == "own":
        zs = p.features
    else:
        raise ConfigError(f"mixup_features must be 'peer' or 'own', got {mixup_features!r}")
    z_mix, y_mix = dir_mixup(zs, [b.one_hot for b in batches], lam)
    p.extra = cross_entropy(y_mix, e[i].logits_from_features(z_mix))
    p.lam = lam
    p.total = nx.add(p.base, nx.scale(p.extra, weights.extra_weight))
    return p


def l_dir(
    i: int,
    e: ModelEnsemble,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str,
    rng: np.random.Generator,
    **kw,
) -> Tensor:
    """Ensemble loss plus cross-entropy of G_i on a Dir-mixup of the domain features."""
    return dir_pass(i, e, batches, weights, reg, rng, **kw).total


def dst_pass(
    i: int,
    e: ModelEnsemble,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str,
    rng: np.random.Generator,
    *,
    alpha: DirichletParams | None = None,
    kernel: KernelSpec | None = None,
    peers: Sequence[DomainModel] | None = None,
    lam=None,
) -> MemberPass:
    m = len(batches)
    if m < 2:
        raise PreconditionError("distillation needs at least two ensemble members")
    p = _member_pass(e[i], batches, weights, reg, kernel)
    source = peers if peers is not None else e.members
    others = [source[j] for j in range(m) if j != i]
    if lam is None:
        lam = sample_dirichlet(alpha or DirichletParams.flat(m - 1), rng)
    lam = np.asarray(lam, dtype=np.float64)
    y_distill = distill_label(others, batches[i].inputs, lam, weights.distill_temperature)
    p.extra = cross_entropy(y_distill, p.logits[i])
    p.lam = lam
    p.total = nx.add(p.base, nx.scale(p.extra, weights.extra_weight))
    return p


def l_dst(
    i: int,
    e: ModelEnsemble,
    batches: Sequence[LabeledBatch],
    weights: LossWeights,
    reg: str,
    rng: np.random.Generator,
    **kw,
) -> Tensor:
    """Ensemble loss plus cross-entropy of M_i against peer-distilled labels on domain i."""
    return dst_pass(i, e, batches, weights, reg, rng, **kw).total
