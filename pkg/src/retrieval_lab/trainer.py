"""Two-stage training: stage A on the original classes, then incremental steps.

An incremental step copies the trained net, keeps a frozen snapshot as the
teacher, widens the head for the new classes and trains on new-class data
only. ``method`` selects which regulariser is added to cross-entropy +
triplet: distillation and MMD (``ours``), distillation only (``lwf``),
feature L2 (``l2feat``), EWC (``ewc``), nothing (``finetune``), or no
training at all (``feature_extraction``).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from . import losses as L
from .datagen import ClassSplitDataset, LabeledSet, PKSampler
from .diffcore import ContractError
from .embednet import EmbeddingNet, FrozenSnapshot, extend_classifier, snapshot
from .retrieval import DEFAULT_KS, evaluate

log = logging.getLogger(__name__)

METHODS = ("ours", "finetune", "lwf", "l2feat", "ewc", "feature_extraction", "joint_reference")

# full-scale settings, kept for reference; desk defaults are in TrainConfig
PAPER_EPOCHS = 800
PAPER_LR_EXTRACTOR = 1e-6
PAPER_LR_HEAD = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one training run.

    Desk defaults differ from the full-scale setup (800 epochs, learning
    rates 1e-6 / 1e-5 for a pretrained Inception backbone); small randomly
    initialised MLPs need larger steps and fewer epochs.
    """

    method: str = "ours"
    epochs: int = 200
    stage_a_epochs: Optional[int] = None
    lr_extractor: float = 1e-3
    lr_head: float = 1e-2
    weights: L.LossWeights = L.LossWeights()
    kernel: L.KernelSpec = L.KernelSpec()
    seed: int = 0
    P: int = 4
    K: int = 4
    normalize: bool = True
    l2_weight: float = 1.0
    ewc_strength: float = 100.0
    fisher_samples: Optional[int] = None
    trace_every: int = 20
    feature_dim: int = 32
    hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.method != "feature_extraction" and not (self.lr_extractor > 0 and self.lr_head > 0):
            raise ValueError("learning rates must be positive")

    @property
    def a_epochs(self) -> int:
        return self.epochs if self.stage_a_epochs is None else self.stage_a_epochs

    def effective_weights(self) -> L.LossWeights:
        if self.method == "ours":
            return self.weights
        if self.method == "lwf":
            return replace(self.weights, beta=0.0)
        return replace(self.weights, alpha=0.0, beta=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["kernel"]["bandwidths"] = list(self.kernel.bandwidths)
        d["kernel"]["multipliers"] = list(self.kernel.multipliers)
        return d


# --------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, dc.Tensor], state: AdamState, lr: Dict[str, float]) -> None:
    """Bias-corrected Adam update in place; ``lr`` maps parameter name to rate.

    Parameters without a gradient are left alone.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = np.argwhere(~np.isfinite(p.grad))[0]
            raise FloatingPointError(
                f"non-finite gradient in {name} at {tuple(int(i) for i in bad)} (step {state.step + 1})"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)


def group_lrs(net: EmbeddingNet, config: TrainConfig) -> Dict[str, float]:
    groups = net.groups()
    lr = {k: config.lr_extractor for k in groups["extractor"]}
    lr.update({k: config.lr_head for k in groups["head"]})
    return lr


# --------------------------------------------------------------- reporting
def head_labels(net_class_ids: Sequence[int], y: np.ndarray, offset: int = 0) -> np.ndarray:
    pos = {c: i for i, c in enumerate(net_class_ids)}
    return np.array([pos[int(c)] - offset for c in y], dtype=np.intp)


def evaluate_groups(net, dataset: ClassSplitDataset, group_ids: Sequence[int],
                    ks: Sequence[int] = DEFAULT_KS, with_pr: bool = True) -> Dict[str, dict]:
    """Test-split metrics of ``net`` for each listed group, evaluated separately."""
    out = {}
    for gi in group_ids:
        classes = dataset.groups[gi]
        test = dataset.view(classes, "test")
        metrics = evaluate(net.features(test.x), test.y, ks, with_pr=with_pr)
        metrics["classes"] = list(classes)
        out[group_name(gi)] = metrics
    return out


def group_name(gi: int) -> str:
    return "original" if gi == 0 else f"new{gi}"


@dataclass
class StageResult:
    net: EmbeddingNet
    loss_trace: Dict[str, List[float]]
    map_trace: List[Tuple[int, float]]
    epoch_seconds: List[float]
    first_breakdown: Optional[dict] = None


def _mean_trace(rows: List[dict]) -> Dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


# ------------------------------------------------------------------ stage A
def _supervised_loss(net: EmbeddingNet, x: np.ndarray, labels: np.ndarray, config: TrainConfig):
    feats, logits = net.forward(x)
    ce = L.cross_entropy_new_classes(logits, labels)
    trip = L.triplet_batch_hard(feats, labels, config.weights.margin, config.normalize)
    total = ce + trip
    return total, {"total": total.item(), "ce": ce.item(), "triplet": trip.item()}


def train_supervised(net: EmbeddingNet, data: LabeledSet, config: TrainConfig, epochs: int,
                     sampler_seed: int, monitor: Optional[LabeledSet] = None) -> StageResult:
    """Cross-entropy + triplet training over every head column."""
    sampler = PKSampler(data, config.P, config.K, sampler_seed)
    state = AdamState()
    lr = group_lrs(net, config)
    labels_all = head_labels(net.class_ids, data.y)
    trace: Dict[str, List[float]] = {}
    map_trace, seconds = [], []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        rows = []
        for idx in sampler.epoch(epoch):
            net.zero_grad()
            loss, parts = _supervised_loss(net, data.x[idx], labels_all[idx], config)
            loss.backward()
            adam_step(net.params, state, lr)
            rows.append(parts)
        seconds.append(time.perf_counter() - t0)
        for k, v in _mean_trace(rows).items():
            trace.setdefault(k, []).append(v)
        _maybe_trace_map(net, monitor, epoch, epochs, config, map_trace)
    net.zero_grad()
    return StageResult(net, trace, map_trace, seconds)


def _maybe_trace_map(net, monitor, epoch, epochs, config, map_trace) -> None:
    if monitor is None or config.trace_every <= 0:
        return
    if (epoch + 1) % config.trace_every == 0 or epoch + 1 == epochs:
        map_trace.append((epoch + 1, evaluate(net.features(monitor.x), monitor.y, (1,), with_pr=False)["map"]))


def train_stage_a(dataset: ClassSplitDataset, config: TrainConfig, group: int = 0) -> StageResult:
    """Fresh net trained with cross-entropy + triplet on one class group."""
    classes = dataset.groups[group]
    net = EmbeddingNet.create(dataset.in_dim, classes, config.feature_dim, config.hidden, seed=config.seed)
    train = dataset.view(classes, "train")
    return train_supervised(net, train, config, config.a_epochs, sampler_seed=config.seed + 1)


def train_joint_reference(dataset: ClassSplitDataset, config: TrainConfig,
                          upto_group: Optional[int] = None) -> StageResult:
    """Upper-bound model trained on all classes of groups 0..upto_group at once."""
    last = len(dataset.groups) - 1 if upto_group is None else upto_group
    classes = [c for g in dataset.groups[:last + 1] for c in g]
    net = EmbeddingNet.create(dataset.in_dim, classes, config.feature_dim, config.hidden, seed=config.seed)
    return train_supervised(net, dataset.view(classes, "train"), config, config.epochs,
                            sampler_seed=config.seed + 1)


def prepare_fisher(net: EmbeddingNet, data: LabeledSet, config: TrainConfig, seed: int) -> L.FisherState:
    """Fisher estimate on data the net was just trained on (one sampler epoch).

    Cross-entropy is restricted to the head columns of ``data``'s classes,
    which must be contiguous in the head.
    """
    sampler = PKSampler(data, config.P, config.K, seed)
    classes = data.classes
    ids = list(net.class_ids)
    lo = ids.index(classes[0])
    labels = head_labels(ids, data.y) - lo

    def per_sample(n, x, lab):
        feats, logits = n.forward(x)
        logits = dc.slice_cols(logits, lo, lo + len(classes))
        logp = dc.log_softmax_rows(logits)
        ce = -dc.gather(logp, np.arange(len(lab)), lab)
        return ce + L.triplet_terms(feats, lab, config.weights.margin, config.normalize)

    batches = ((data.x[idx], labels[idx]) for idx in sampler.epoch(0))
    return L.estimate_fisher(net, batches, config.fisher_samples, per_sample)


# -------------------------------------------------------- incremental step
def incremental_step(
    net_a: EmbeddingNet,
    new_train: LabeledSet,
    config: TrainConfig,
    fisher: Optional[L.FisherState] = None,
    step: int = 0,
    monitor: Optional[LabeledSet] = None,
    epochs: Optional[int] = None,
) -> Tuple[EmbeddingNet, StageResult, FrozenSnapshot]:
    """Train an adaptive copy of ``net_a`` on new-class data only.

    Returns the adaptive net, its training record, and the frozen snapshot
    used as teacher. ``monitor`` (test-split data) only feeds the mAP trace.
    """
    new_classes = new_train.classes
    overlap = set(new_classes) & set(net_a.class_ids)
    if overlap:
        raise ContractError(f"classes {sorted(overlap)} are already known to the frozen net")
    frozen = snapshot(net_a)
    if config.method == "feature_extraction":
        return net_a.clone(), StageResult(net_a.clone(), {}, [], []), frozen
    if config.method == "joint_reference":
        raise ContractError("joint_reference is not an incremental method; use train_joint_reference")
    if config.method == "ewc" and fisher is None:
        raise ContractError("ewc needs a FisherState prepared before the step")

    net_b = extend_classifier(net_a, new_classes, seed=config.seed + 2 + step)
    if fisher is not None and config.method == "ewc":
        fisher = fisher.padded_to(net_b)
    weights = config.effective_weights()
    l2_weight = config.l2_weight if config.method == "l2feat" else 0.0
    ewc_strength = config.ewc_strength if config.method == "ewc" else 0.0
    n_old = frozen.num_classes
    labels_new = head_labels(net_b.class_ids, new_train.y, offset=n_old)

    sampler = PKSampler(new_train, config.P, config.K, seed=config.seed + 3 + step)
    state = AdamState()
    lr = group_lrs(net_b, config)
    trace: Dict[str, List[float]] = {}
    map_trace, seconds = [], []
    first = None
    n_epochs = config.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        rows = []
        for idx in sampler.epoch(epoch):
            net_b.zero_grad()
            loss, parts = L.combined_loss(
                new_train.x[idx], labels_new[idx], net_b, frozen, weights, config.kernel,
                config.normalize, l2_weight, fisher if ewc_strength > 0 else None, ewc_strength,
            )
            if first is None:
                first = parts.as_dict()
            loss.backward()
            adam_step(net_b.params, state, lr)
            rows.append(parts.as_dict())
        seconds.append(time.perf_counter() - t0)
        for k, v in _mean_trace(rows).items():
            trace.setdefault(k, []).append(v)
        _maybe_trace_map(net_b, monitor, epoch, n_epochs, config, map_trace)
    net_b.zero_grad()
    return net_b, StageResult(net_b, trace, map_trace, seconds, first), frozen


# ----------------------------------------------------------------- reports
def make_report(arm: str, step: int, net, dataset: ClassSplitDataset, group_ids: Sequence[int],
                result: Optional[StageResult], config: TrainConfig, cell: str = "default",
                with_pr: bool = True) -> dict:
    report = {
        "arm": arm,
        "cell": cell,
        "step": step,
        "seed": config.seed,
        "groups": evaluate_groups(net, dataset, group_ids, with_pr=with_pr),
        "loss_trace": {} if result is None else result.loss_trace,
        "map_trace": [] if result is None else [list(t) for t in result.map_trace],
        "epoch_seconds": [] if result is None else result.epoch_seconds,
        "config": config.to_dict(),
    }
    if result is not None and result.first_breakdown is not None:
        report["first_batch"] = result.first_breakdown
    return report


@dataclass
class StageA:
    """Trained stage-A net plus what later steps may use from the original data."""

    net: EmbeddingNet
    result: StageResult
    fisher: Optional[L.FisherState]


def prepare_stage_a(dataset: ClassSplitDataset, config: TrainConfig, with_fisher: bool = False) -> StageA:
    res = train_stage_a(dataset, config)
    fisher = None
    if with_fisher:
        fisher = prepare_fisher(res.net, dataset.view(dataset.groups[0], "train"), config, config.seed + 5)
    return StageA(res.net, res, fisher)


def run_one_step(dataset: ClassSplitDataset, config: TrainConfig, stage_a: Optional[StageA] = None,
                 cell: str = "default", arm: Optional[str] = None, with_pr: bool = True) -> dict:
    """Stage A (unless given), then one incremental step on all of group 1.

    Groups beyond 1 are merged into the single new step.
    """
    if len(dataset.groups) < 2:
        raise ContractError("one-step protocol needs an original group and at least one new group")
    new_classes = [c for g in dataset.groups[1:] for c in g]
    one = replace(dataset, groups=[dataset.groups[0], new_classes])
    arm = arm or config.method
    if config.method == "joint_reference":
        res = train_joint_reference(one, config)
        return make_report(arm, 1, res.net, one, [0, 1], res, config, cell, with_pr)
    if stage_a is None:
        stage_a = prepare_stage_a(one, config, with_fisher=config.method == "ewc")
    elif config.method == "ewc" and stage_a.fisher is None:
        fisher = prepare_fisher(stage_a.net, one.view(one.groups[0], "train"), config, config.seed + 5)
        stage_a = replace(stage_a, fisher=fisher)
    monitor = one.view(one.groups[0], "test")
    net_b, res, _ = incremental_step(stage_a.net, one.view(new_classes, "train"), config,
                                     fisher=stage_a.fisher, monitor=monitor)
    groups = [1] if config.method == "feature_extraction" else [0, 1]
    return make_report(arm, 1, net_b, one, groups, res, config, cell, with_pr)


def stage_a_report(dataset: ClassSplitDataset, stage_a: StageA, config: TrainConfig,
                   cell: str = "default") -> dict:
    return make_report("initial", 0, stage_a.net, dataset, [0], stage_a.result, config, cell)


def run_multi_step(dataset: ClassSplitDataset, config: TrainConfig, stage_a: Optional[StageA] = None,
                   cell: str = "default", with_pr: bool = True) -> List[dict]:
    """Add groups 1..G one at a time; each trained net becomes the next frozen net.

    Report k evaluates the originals and groups 1..k.
    """
    if len(dataset.groups) < 3:
        raise ContractError("multi-step protocol needs at least two groups after the original")
    if config.method in ("joint_reference",):
        raise ContractError("joint_reference has no multi-step schedule")
    use_ewc = config.method == "ewc"
    if stage_a is None or (use_ewc and stage_a.fisher is None):
        stage_a = prepare_stage_a(dataset, config, with_fisher=use_ewc)
    net = stage_a.net
    fisher = stage_a.fisher
    monitor = dataset.view(dataset.groups[0], "test")
    reports = []
    for step in range(1, len(dataset.groups)):
        train = dataset.view(dataset.groups[step], "train")
        net_b, res, _ = incremental_step(net, train, config, fisher=fisher, step=step, monitor=monitor)
        reports.append(make_report(config.method, step, net_b, dataset, list(range(step + 1)),
                                   res, config, cell, with_pr))
        if use_ewc:
            new_f = prepare_fisher(net_b, train, config, config.seed + 5 + step)
            fisher = fisher.merged(new_f)
        if config.method != "feature_extraction":
            net = net_b
    return reports


# -------------------------------------------------------------- wall clock
def measure_wall_clock(arm: str, config: TrainConfig, dataset: ClassSplitDataset,
                       stage_a: StageA, epochs: int = 4) -> float:
    """Mean seconds per epoch for ``arm``, excluding one warm-up epoch.

    Incremental arms train on the new classes only; ``joint_reference``
    trains on every class.
    """
    if epochs < 2:
        raise ValueError("need a warm-up epoch plus at least one timed epoch")
    cfg = replace(config, method=arm, epochs=epochs, trace_every=0)
    if arm == "feature_extraction":
        return 0.0
    new_classes = [c for g in dataset.groups[1:] for c in g]
    if arm == "joint_reference":
        one = replace(dataset, groups=[dataset.groups[0], new_classes])
        res = train_joint_reference(one, cfg)
    else:
        fisher = stage_a.fisher
        if arm == "ewc" and fisher is None:
            fisher = prepare_fisher(stage_a.net, dataset.view(dataset.groups[0], "train"), cfg, cfg.seed + 5)
        _, res, _ = incremental_step(stage_a.net, dataset.view(new_classes, "train"), cfg, fisher=fisher)
    return float(np.mean(res.epoch_seconds[1:]))
