"""Synthetic fine-grained data, feature-file loading and class-group splits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .diffcore import ContractError

# desk defaults: 4 super-categories x 4 sub-categories, 40 samples each
DEFAULT_SYNTHETIC = dict(
    n_super=4,
    subs_per_super=4,
    samples_per_class=40,
    in_dim=16,
    super_spread=1.0,
    sub_spread=4.5,
    noise=1.0,
    nuisance=6.5,
)


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class LabeledSet:
    """Feature rows and their class labels, nothing else."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.y))


@dataclass
class ClassSplitDataset:
    """Labelled samples with a train/test assignment and an ordered class schedule.

    ``groups[0]`` holds the original classes; later groups are added
    incrementally in order.
    """

    x: np.ndarray
    y: np.ndarray
    is_train: Optional[np.ndarray] = None
    groups: Optional[List[List[int]]] = None
    seed: Optional[int] = None
    train_fraction: Optional[float] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != len(self.y):
            raise ContractError(f"{self.x.shape} samples for {len(self.y)} labels")
        if self.x.shape[1] == 0:
            raise ContractError("samples have no features")
        if self.groups is not None:
            flat = [c for g in self.groups for c in g]
            if len(flat) != len(set(flat)):
                raise ContractError("class groups overlap")
            if set(flat) != set(self.classes):
                raise ContractError("class groups do not cover every class")

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def view(self, classes: Sequence[int], split: str) -> LabeledSet:
        """Copy of the rows of ``classes`` in ``split`` ("train", "test" or "all")."""
        mask = np.isin(self.y, np.asarray(list(classes), dtype=np.int64))
        if split != "all":
            if self.is_train is None:
                raise ContractError("dataset has no train/test split; call split_schedule first")
            mask &= self.is_train if split == "train" else ~self.is_train
        return LabeledSet(self.x[mask].copy(), self.y[mask].copy())

    def manifest(self) -> dict:
        bounds = []
        if self.groups:
            start = 0
            for g in self.groups:
                bounds.append([start, start + len(g)])
                start += len(g)
        return {
            "in_dim": self.in_dim,
            "class_count": len(self.classes),
            "group_boundaries": bounds,
            "split_fractions": {"train": self.train_fraction, "test": None if self.train_fraction is None else 1 - self.train_fraction},
            "seed": self.seed,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def generate_synthetic(
    n_super: int = 4,
    subs_per_super: int = 4,
    samples_per_class: int = 40,
    in_dim: int = 16,
    super_spread: float = DEFAULT_SYNTHETIC["super_spread"],
    sub_spread: float = DEFAULT_SYNTHETIC["sub_spread"],
    noise: float = DEFAULT_SYNTHETIC["noise"],
    nuisance: float = DEFAULT_SYNTHETIC["nuisance"],
    seed: int = 0,
) -> ClassSplitDataset:
    """Hierarchical Gaussian classes with sub-category attribute blocks.

    The feature axis is cut into ``subs_per_super`` contiguous blocks. Every
    class shares its super-category's center; sub-category ``j`` adds a
    ``sub_spread``-scale offset confined to block ``j``, so sub-categories of
    one super-category differ only in their own attribute block. On the
    opposite block ``(j + subs_per_super // 2) % subs_per_super`` the class
    carries extra within-class variation of scale ``nuisance``, which a good
    embedding for sub-category ``j`` learns to ignore.

    Labels run sub-major, ``j * n_super + s``, so label-order groups hold whole
    sub-category slots across all super-categories. With the desk defaults
    the first half of the labels varies along blocks that are pure nuisance
    for the second half, and the reverse.

    Args:
        n_super: Number of super-categories.
        subs_per_super: Sub-categories per super-category (at most ``in_dim``).
        samples_per_class: Rows drawn per class.
        in_dim: Feature dimension.
        super_spread: Std of the super-category centers.
        sub_spread: Std of the in-block sub-category offsets.
        noise: Isotropic within-class std.
        nuisance: Extra within-class std on the opposite block (0 disables it).
        seed: RNG seed; identical arguments give identical arrays.
    """
    for name, v in (("n_super", n_super), ("subs_per_super", subs_per_super),
                    ("samples_per_class", samples_per_class), ("in_dim", in_dim)):
        if v < 1:
            raise ContractError(f"{name} must be >= 1, got {v}")
    if subs_per_super > in_dim:
        raise ContractError(f"subs_per_super={subs_per_super} needs in_dim >= {subs_per_super}, got {in_dim}")
    if min(super_spread, sub_spread, noise, nuisance) < 0:
        raise ContractError("spreads, noise and nuisance must be non-negative")
    rng = np.random.default_rng(seed)
    supers = rng.normal(0.0, super_spread, size=(n_super, in_dim))
    blocks = np.array_split(np.arange(in_dim), subs_per_super)
    xs, ys = [], []
    for j in range(subs_per_super):
        scale = np.full(in_dim, float(noise))
        if subs_per_super > 1:
            opposite = blocks[(j + subs_per_super // 2) % subs_per_super]
            scale[opposite] = np.hypot(noise, nuisance)
        for s in range(n_super):
            offset = np.zeros(in_dim)
            offset[blocks[j]] = rng.normal(0.0, sub_spread, size=len(blocks[j]))
            draw = rng.normal(0.0, 1.0, size=(samples_per_class, in_dim)) * scale
            xs.append(supers[s] + offset + draw)
            ys.append(np.full(samples_per_class, j * n_super + s))
    params = dict(n_super=n_super, subs_per_super=subs_per_super, samples_per_class=samples_per_class,
                  in_dim=in_dim, super_spread=super_spread, sub_spread=sub_spread, noise=noise,
                  nuisance=nuisance)
    return ClassSplitDataset(np.concatenate(xs), np.concatenate(ys), seed=seed, meta={"synthetic": params})


def split_schedule(
    dataset: ClassSplitDataset,
    original_count: int,
    group_sizes: Sequence[int],
    train_fraction: float = 0.6,
    seed: Optional[int] = None,
) -> ClassSplitDataset:
    """Assign classes to groups in label order and split each class train/test."""
    classes = dataset.classes
    total = original_count + sum(group_sizes)
    if total != len(classes):
        raise ContractError(
            f"original_count + sum(group_sizes) = {original_count} + {sum(group_sizes)} = {total}, "
            f"but the dataset has {len(classes)} classes"
        )
    if original_count < 1 or any(g < 1 for g in group_sizes):
        raise ContractError("every group needs at least one class")
    if not 0 < train_fraction < 1:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    groups = [classes[:original_count]]
    start = original_count
    for g in group_sizes:
        groups.append(classes[start:start + g])
        start += g
    rng = np.random.default_rng(dataset.seed if seed is None else seed)
    is_train = np.zeros(len(dataset.y), dtype=bool)
    for c in classes:
        idx = np.flatnonzero(dataset.y == c)
        n_train = int(round(train_fraction * len(idx)))
        if n_train < 1 or n_train >= len(idx):
            raise ContractError(f"class {c} with {len(idx)} samples cannot be split at {train_fraction}")
        is_train[rng.permutation(idx)[:n_train]] = True
    return replace(dataset, is_train=is_train, groups=groups, train_fraction=train_fraction,
                   seed=dataset.seed if seed is None else seed)


def load_feature_csv(path, in_dim: Optional[int] = None, allowed_labels: Optional[Sequence[int]] = None) -> ClassSplitDataset:
    """Parse ``label,f0,...`` rows (header required) into an unsplit dataset."""
    path = Path(path)
    allowed = None if allowed_labels is None else {int(c) for c in allowed_labels}
    xs, ys = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "empty file")
        width = len(header) - 1
        if width < 1:
            raise ParseError(path, 1, "no feature columns")
        if in_dim is not None and width != in_dim:
            raise ParseError(path, 1, f"expected {in_dim} feature columns, found {width}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(path, line, f"expected {width + 1} cells, found {len(row)}")
            try:
                label = int(row[0])
            except ValueError:
                raise ParseError(path, line, f"label {row[0]!r} is not an integer") from None
            if allowed is not None and label not in allowed:
                raise ParseError(path, line, f"unknown label {label}")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(path, line, f"non-numeric cell: {exc}") from None
            ys.append(label)
            xs.append(values)
    if not ys:
        raise ParseError(path, 2, "no data rows")
    return ClassSplitDataset(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64), meta={"source": str(path)})


class PKSampler:
    """Batches of P distinct classes with K samples each.

    Within an epoch every class's samples are shuffled and cut into K-sized
    chunks (remainders dropped), and chunks are drawn without replacement.
    If the set holds fewer than P classes, all classes go into every batch.
    """

    def __init__(self, data: LabeledSet, P: int = 4, K: int = 4, seed: int = 0):
        if K < 2:
            raise ContractError(f"K={K}: triplet mining needs at least 2 samples per class")
        classes = data.classes
        if len(classes) < 2:
            raise ContractError("sampler needs at least two classes for negatives")
        self.P = min(P, len(classes))
        self.K = K
        self.seed = seed
        self.data = data
        self._by_class = {c: np.flatnonzero(data.y == c) for c in classes}
        short = [c for c, idx in self._by_class.items() if len(idx) < K]
        if short:
            raise ContractError(f"classes {short} have fewer than K={K} samples")
        if self.P * K > len(data):
            raise ContractError(f"P*K = {self.P * K} exceeds the {len(data)} available samples")

    def epoch(self, epoch: int) -> List[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        chunks: Dict[int, List[np.ndarray]] = {}
        for c, idx in self._by_class.items():
            perm = rng.permutation(idx)
            n = len(perm) // self.K
            chunks[c] = [perm[i * self.K:(i + 1) * self.K] for i in range(n)]
        batches = []
        while True:
            avail = [c for c in chunks if chunks[c]]
            if len(avail) < self.P:
                break
            priority = rng.random(len(avail))
            order = sorted(range(len(avail)), key=lambda i: (-len(chunks[avail[i]]), priority[i]))
            picked = [avail[i] for i in order[:self.P]]
            rng.shuffle(picked)
            batches.append(np.concatenate([chunks[c].pop() for c in picked]))
        return batches

    def batches_per_epoch(self) -> int:
        return len(self.epoch(0))

    def stream(self, epochs: int) -> Iterator[np.ndarray]:
        for e in range(epochs):
            yield from self.epoch(e)


def batch_sampler(data: LabeledSet, P: int = 4, K: int = 4, seed: int = 0, epochs: int = 1) -> Iterator[np.ndarray]:
    return PKSampler(data, P, K, seed).stream(epochs)
