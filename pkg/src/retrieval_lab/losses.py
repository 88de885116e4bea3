"""Training objectives for the frozen/adaptive incremental protocol.

Terms: restricted cross-entropy, batch-hard triplet, temperature
distillation against the frozen head, multi-bandwidth Gaussian MMD between
frozen and adaptive features, and the baseline regularisers (feature L2,
EWC). ``combined_loss`` assembles the weighted objective and returns a
per-term breakdown.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, DomainError, Tensor

DEFAULT_MARGIN = 0.5
DEFAULT_TEMPERATURE = 2.0
MEDIAN_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _median(v: np.ndarray) -> float:
    # np.median without its generic-axis overhead; this runs once per batch
    n = v.size
    if n == 0:
        return 0.0
    k = n // 2
    if n % 2:
        return float(np.partition(v, k)[k])
    p = np.partition(v, (k - 1, k))
    return float(0.5 * (p[k - 1] + p[k]))


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel bandwidths for the MMD term.

    ``selection="median"`` rescales ``multipliers`` by the median pairwise
    squared distance of the pooled batch (the result is used as σ²);
    ``selection="fixed"`` uses ``bandwidths`` as σ values directly.
    """

    selection: str = "median"
    bandwidths: Tuple[float, ...] = ()
    multipliers: Tuple[float, ...] = MEDIAN_MULTIPLIERS

    def __post_init__(self):
        if self.selection not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth selection {self.selection!r}")
        values = self.bandwidths if self.selection == "fixed" else self.multipliers
        if len(values) == 0:
            raise ValueError("kernel needs at least one bandwidth")
        if any(not v > 0 for v in values):
            raise DomainError(f"bandwidths must be positive, got {values}")

    @classmethod
    def fixed(cls, *sigmas: float) -> "KernelSpec":
        return cls(selection="fixed", bandwidths=tuple(float(s) for s in sigmas))

    def sigmas_squared(self, pooled: np.ndarray) -> np.ndarray:
        """σ_m² values for a pooled (2N×d) batch; never differentiated."""
        if self.selection == "fixed":
            return np.asarray(self.bandwidths, dtype=np.float64) ** 2
        return self.from_sqdist(pdist(pooled, "sqeuclidean"))

    def from_sqdist(self, sq: np.ndarray) -> np.ndarray:
        """σ_m² values given the condensed pairwise squared distances of the pooled batch."""
        if self.selection == "fixed":
            return np.asarray(self.bandwidths, dtype=np.float64) ** 2
        med = _median(sq)
        if not med > 0:
            med = 1.0
        return med * np.asarray(self.multipliers, dtype=np.float64)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # distillation weight
    beta: float = 1.0  # MMD weight
    margin: float = DEFAULT_MARGIN
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        for name in ("alpha", "beta", "margin", "temperature"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.alpha < 0 or self.beta < 0 or self.margin < 0:
            raise ValueError("alpha, beta and margin must be non-negative")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")


# ------------------------------------------------------------- cross-entropy
def cross_entropy_new_classes(logits_new, labels) -> Tensor:
    """Mean negative log-softmax of the true class, softmax over the given columns.

    ``labels`` index columns of ``logits_new`` (0..m-1).
    """
    logits_new = dc.as_tensor(logits_new)
    labels = np.asarray(labels, dtype=np.intp)
    n, m = logits_new.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if np.any((labels < 0) | (labels >= m)):
        bad = int(np.flatnonzero((labels < 0) | (labels >= m))[0])
        raise IndexError(f"label {labels[bad]} at row {bad} outside [0, {m})")
    logp = dc.log_softmax_rows(logits_new)
    return -dc.mean(dc.gather(logp, np.arange(n), labels))


# ------------------------------------------------------------------- triplet
def similarity_matrix(features, normalize: bool = True) -> Tensor:
    r = dc.l2_normalize_rows(features) if normalize else dc.as_tensor(features)
    return dc.matmul(r, dc.transpose(r))


def hard_pairs(sim: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of the least similar positive and most similar negative per anchor.

    Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    missing = ~pos_mask.any(axis=1)
    if missing.any():
        i = int(np.flatnonzero(missing)[0])
        raise ContractError(f"class {labels[i]} has no in-batch positive for anchor {i}")
    pos = np.argmin(np.where(pos_mask, sim, np.inf), axis=1)
    if not neg_mask.any(axis=1).all():
        raise ContractError("batch holds a single class; no negatives to mine")
    neg = np.argmax(np.where(neg_mask, sim, -np.inf), axis=1)
    return pos, neg


def triplet_terms(features, labels, margin: float = DEFAULT_MARGIN, normalize: bool = True) -> Tensor:
    """Per-anchor hinge values ``max(0, margin + S_neg - S_pos)``."""
    labels = np.asarray(labels)
    sim = similarity_matrix(features, normalize)
    pos, neg = hard_pairs(sim.data, labels)
    rows = np.arange(len(labels))
    s_pos = dc.gather(sim, rows, pos)
    s_neg = dc.gather(sim, rows, neg)
    return dc.max_with_scalar(margin + s_neg - s_pos, 0.0)


def triplet_batch_hard(features, labels, margin: float = DEFAULT_MARGIN, normalize: bool = True) -> Tensor:
    return dc.mean(triplet_terms(features, labels, margin, normalize))


# -------------------------------------------------------------- distillation
def distillation(frozen_logits, adaptive_logits_first_n, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Cross-entropy of softened adaptive outputs against softened frozen outputs.

    No T² rescaling is applied. The frozen side is treated as a constant.
    """
    frozen = np.asarray(frozen_logits.data if isinstance(frozen_logits, Tensor) else frozen_logits)
    adaptive = dc.as_tensor(adaptive_logits_first_n)
    if frozen.shape != adaptive.shape:
        raise DimensionError(f"frozen logits {frozen.shape} vs adaptive logits {adaptive.shape}")
    p = dc.softmax_rows(Tensor(frozen), temperature).data
    return dc.soft_cross_entropy(p, adaptive, temperature)


def soft_target_entropy(frozen_logits, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Mean entropy of the softened frozen outputs; the minimum of :func:`distillation`."""
    z = np.asarray(frozen_logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())


# ----------------------------------------------------------------------- MMD
def gaussian_kernel(a, b, sigma: float) -> float:
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"kernel arguments differ in shape: {a.shape} vs {b.shape}")
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma ** 2)))


def multi_kernel(a, b, sigmas: Sequence[float]) -> float:
    return float(sum(gaussian_kernel(a, b, s) for s in sigmas))


def mmd_bracket(r, r_prime, spec: KernelSpec = KernelSpec()) -> Tensor:
    """Σk(R,R) − 2Σk(R,R′) + Σk(R′,R′) over all index pairs, i=j included."""
    r, r_prime = dc.as_tensor(r), dc.as_tensor(r_prime)
    if r.ndim != 2 or r.shape != r_prime.shape:
        raise ContractError(f"MMD needs equal-size batches, got {r.shape} and {r_prime.shape}")
    return dc.rbf_mmd_bracket(r, r_prime, spec.from_sqdist)


def mmd_loss(r, r_prime, spec: KernelSpec = KernelSpec()) -> Tensor:
    """Biased Gaussian-kernel MMD with outer factor 1/N.

    The bracket is clamped at zero before the square root; the root's
    derivative is zero at the clamp.
    """
    bracket = mmd_bracket(r, r_prime, spec)
    n = dc.as_tensor(r).shape[0]
    return dc.sqrt(dc.max_with_scalar(bracket, 0.0)) * (1.0 / n)


# ------------------------------------------------------------- baselines
def l2_feature_loss(r, r_prime) -> Tensor:
    """Mean over rows of the squared euclidean distance between feature pairs."""
    r, r_prime = dc.as_tensor(r), dc.as_tensor(r_prime)
    if r.shape != r_prime.shape:
        raise DimensionError(f"feature shapes differ: {r.shape} vs {r_prime.shape}")
    return dc.sum(dc.square(r - r_prime)) * (1.0 / r.shape[0])


@dataclass
class FisherState:
    """Diagonal Fisher estimate plus the anchor parameters it was taken at."""

    fisher: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]

    def __post_init__(self):
        for k, f in self.fisher.items():
            if k not in self.anchor or self.anchor[k].shape != f.shape:
                raise ContractError(f"fisher/anchor shape mismatch for {k}")
            if np.any(f < 0):
                raise ContractError(f"negative fisher entry in {k}")

    def padded_to(self, net) -> "FisherState":
        """Zero-pad head entries so the state matches a net with a wider head."""
        fisher, anchor = {}, {}
        for k, p in net.params.items():
            f = self.fisher.get(k)
            a = self.anchor.get(k)
            if f is None:
                fisher[k] = np.zeros_like(p.data)
                anchor[k] = p.data.copy()
                continue
            if f.shape == p.shape:
                fisher[k], anchor[k] = f, a
                continue
            if f.ndim != p.ndim or any(fs > ps for fs, ps in zip(f.shape, p.shape)):
                raise ContractError(f"cannot pad {k}: {f.shape} -> {p.shape}")
            fisher[k] = np.zeros_like(p.data)
            anchor[k] = np.zeros_like(p.data)
            region = tuple(slice(0, s) for s in f.shape)
            fisher[k][region] = f
            anchor[k][region] = a
        return FisherState(fisher, anchor)

    def merged(self, other: "FisherState") -> "FisherState":
        """Sum of Fisher diagonals, anchored at ``other`` (the newer state)."""
        fisher = {}
        for k, f in other.fisher.items():
            old = self.fisher.get(k)
            if old is not None and old.shape != f.shape:
                pad = np.zeros_like(f)
                pad[tuple(slice(0, s) for s in old.shape)] = old
                old = pad
            fisher[k] = f + (old if old is not None else 0.0)
        return FisherState(fisher, {k: v.copy() for k, v in other.anchor.items()})


def ewc_penalty(net, fisher: FisherState, strength: float) -> Tensor:
    """``strength · Σ F_i (θ_i − θ*_i)²`` over all parameters."""
    if strength < 0:
        raise ValueError("EWC strength must be non-negative")
    total = None
    for k, p in net.params.items():
        if k not in fisher.fisher:
            raise ContractError(f"no fisher entry for parameter {k}")
        f = fisher.fisher[k]
        if f.shape != p.shape:
            raise ContractError(f"fisher for {k} has shape {f.shape}, parameter has {p.shape}")
        term = dc.sum(dc.mul(Tensor(f), dc.square(p - Tensor(fisher.anchor[k]))))
        total = term if total is None else total + term
    return total * float(strength)


def stage_a_sample_losses(net, x: np.ndarray, labels: np.ndarray, margin: float = DEFAULT_MARGIN,
                          normalize: bool = True) -> Tensor:
    """Per-sample stage-A loss (cross-entropy + triplet hinge) inside one batch.

    ``labels`` index the net's head columns. The batch mean of the result is
    the stage-A objective.
    """
    feats, logits = net.forward(x)
    n = len(labels)
    logp = dc.log_softmax_rows(logits)
    ce = -dc.gather(logp, np.arange(n), labels)
    return ce + triplet_terms(feats, labels, margin, normalize)


def estimate_fisher(
    net,
    batches,
    n_samples: Optional[int] = None,
    per_sample_loss: Optional[Callable] = None,
) -> FisherState:
    """Diagonal empirical Fisher from squared per-sample gradients.

    ``batches`` yields ``(x, head_labels)`` pairs from data the net was just
    trained on. Each sample's own loss term is differentiated separately;
    at most ``n_samples`` samples are used.
    """
    per_sample_loss = per_sample_loss or stage_a_sample_losses
    sums = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    count = 0
    for x, labels in batches:
        for i in range(len(labels)):
            if n_samples is not None and count >= n_samples:
                break
            net.zero_grad()
            terms = per_sample_loss(net, x, labels)
            loss = dc.take(terms, i)
            if loss.requires_grad:
                loss.backward()
            for k, p in net.params.items():
                if p.grad is not None:
                    sums[k] += p.grad ** 2
            count += 1
        if n_samples is not None and count >= n_samples:
            break
    net.zero_grad()
    if count == 0:
        raise ContractError("estimate_fisher received no samples")
    return FisherState(
        {k: v / count for k, v in sums.items()},
        {k: p.data.copy() for k, p in net.params.items()},
    )


# --------------------------------------------------------------- combined
@dataclass
class LossBreakdown:
    total: float
    ce: float
    triplet: float
    dist: float = 0.0
    mmd: float = 0.0
    l2feat: float = 0.0
    ewc: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def combined_loss(
    x: np.ndarray,
    labels_new: np.ndarray,
    net_b,
    snapshot_a,
    weights: LossWeights = LossWeights(),
    spec: KernelSpec = KernelSpec(),
    normalize: bool = True,
    l2_weight: float = 0.0,
    fisher: Optional[FisherState] = None,
    ewc_strength: float = 0.0,
) -> Tuple[Tensor, LossBreakdown]:
    """Weighted objective ``α·dist + β·mmd + ce + triplet`` (+ baseline terms).

    ``labels_new`` index the new-class block of the head (0..m-1). Terms with
    zero weight are not built, so α=β=0 is exactly the fine-tuning loss.
    """
    n_old = snapshot_a.num_classes
    m = net_b.num_classes - n_old
    if m < 1:
        raise DimensionError(f"adaptive head ({net_b.num_classes}) is not wider than frozen head ({n_old})")
    feats_b, logits_b = net_b.forward(x)
    ce = cross_entropy_new_classes(dc.slice_cols(logits_b, n_old, n_old + m), labels_new)
    trip = triplet_batch_hard(feats_b, labels_new, weights.margin, normalize)
    total = ce + trip
    parts = {"ce": ce.item(), "triplet": trip.item()}

    need_frozen = weights.alpha > 0 or weights.beta > 0 or l2_weight > 0
    if need_frozen:
        feats_a, logits_a = snapshot_a.forward(x)
    if weights.alpha > 0:
        dist = distillation(logits_a, dc.slice_cols(logits_b, 0, n_old), weights.temperature)
        total = total + dist * weights.alpha
        parts["dist"] = dist.item()
    if weights.beta > 0:
        mmd = mmd_loss(feats_a, feats_b, spec)
        total = total + mmd * weights.beta
        parts["mmd"] = mmd.item()
    if l2_weight > 0:
        # compared in the retrieval space when features are normalized; raw
        # feature norms are unconstrained by the normalized triplet loss
        if normalize:
            l2 = l2_feature_loss(dc.l2_normalize_rows(feats_a), dc.l2_normalize_rows(feats_b))
        else:
            l2 = l2_feature_loss(feats_a, feats_b)
        total = total + l2 * l2_weight
        parts["l2feat"] = l2.item()
    if fisher is not None and ewc_strength > 0:
        ewc = ewc_penalty(net_b, fisher, ewc_strength)
        total = total + ewc
        parts["ewc"] = ewc.item()
    return total, LossBreakdown(total=total.item(), **parts)
