"""Feedforward embedding network with an extendable classifier head."""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor

# full-scale feature width used with the Inception backbone; desk runs use 32
PAPER_FEATURE_DIM = 512
DEFAULT_FEATURE_DIM = 32
DEFAULT_HIDDEN = (64, 64)
NEW_HEAD_INIT_STD = 0.01

MAGIC = b"INCR"
FORMAT_VERSION = 1


def _kaiming(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class EmbeddingNet:
    """MLP feature extractor followed by a linear classifier.

    Parameters are stored as named :class:`Tensor` leaves. Extractor layers
    are ``ext{i}.W`` / ``ext{i}.b``; the classifier is ``head.W`` / ``head.b``.
    Hidden layers use relu; the final extractor layer is affine only, and its
    output is the retrieval feature.

    ``class_ids`` records which dataset labels the head rows stand for, in
    head order.
    """

    def __init__(self, params: "OrderedDict[str, np.ndarray]", class_ids: Sequence[int]):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (name, Tensor(np.array(value, dtype=np.float64), requires_grad=True))
            for name, value in params.items()
        )
        self.class_ids = [int(c) for c in class_ids]
        self._check()

    @classmethod
    def create(
        cls,
        in_dim: int,
        class_ids: Sequence[int],
        feature_dim: int = DEFAULT_FEATURE_DIM,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        seed: int = 0,
        zero_head: bool = False,
    ) -> "EmbeddingNet":
        rng = np.random.default_rng(seed)
        widths = [in_dim, *hidden, feature_dim]
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"ext{i}.W"] = _kaiming(rng, fan_in, fan_out)
            params[f"ext{i}.b"] = np.zeros(fan_out)
        n = len(class_ids)
        if zero_head:
            params["head.W"] = np.zeros((feature_dim, n))
        else:
            params["head.W"] = rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(feature_dim, n))
        params["head.b"] = np.zeros(n)
        return cls(params, class_ids)

    def _check(self) -> None:
        w = self.params["head.W"].data
        if w.shape[0] != self.feature_dim:
            raise DimensionError(
                f"classifier input width {w.shape[0]} != feature width {self.feature_dim}"
            )
        if w.shape[1] != len(self.class_ids):
            raise DimensionError(f"head has {w.shape[1]} outputs for {len(self.class_ids)} classes")

    # ------------------------------------------------------------- structure
    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("ext") and k.endswith(".W"))

    @property
    def in_dim(self) -> int:
        return self.params["ext0.W"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.params[f"ext{self.n_layers - 1}.W"].shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def groups(self) -> Dict[str, list]:
        """Parameter names by optimizer group."""
        return {
            "extractor": [k for k in self.params if k.startswith("ext")],
            "head": [k for k in self.params if k.startswith("head")],
        }

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "EmbeddingNet":
        return EmbeddingNet(OrderedDict((k, v.data.copy()) for k, v in self.params.items()), self.class_ids)

    # ---------------------------------------------------------------- forward
    def forward(self, batch) -> Tuple[Tensor, Tensor]:
        return _forward(self.params, self.n_layers, batch)

    __call__ = forward

    def features(self, x: np.ndarray) -> np.ndarray:
        """Numpy features with no graph, for evaluation."""
        return _forward_numpy(self.arrays(), self.n_layers, x)[0]


def _check_width(expected: int, batch: Tensor) -> None:
    if batch.ndim != 2 or batch.shape[1] != expected:
        raise DimensionError(f"batch of shape {batch.shape} does not match input width {expected}")


def _forward(params, n_layers: int, batch) -> Tuple[Tensor, Tensor]:
    h = dc.as_tensor(batch)
    _check_width(params["ext0.W"].shape[0], h)
    for i in range(n_layers):
        h = dc.add_bias(dc.matmul(h, params[f"ext{i}.W"]), params[f"ext{i}.b"])
        if i < n_layers - 1:
            h = dc.relu(h)
    logits = dc.add_bias(dc.matmul(h, params["head.W"]), params["head.b"])
    return h, logits


def _forward_numpy(arrays, n_layers: int, x) -> Tuple[np.ndarray, np.ndarray]:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != arrays["ext0.W"].shape[0]:
        raise DimensionError(f"batch of shape {h.shape} does not match input width {arrays['ext0.W'].shape[0]}")
    for i in range(n_layers):
        h = h @ arrays[f"ext{i}.W"] + arrays[f"ext{i}.b"]
        if i < n_layers - 1:
            h = np.where(h > 0, h, 0.0)
    return h, h @ arrays["head.W"] + arrays["head.b"]


class FrozenSnapshot:
    """Read-only parameter copy of an :class:`EmbeddingNet`.

    Forward passes return constant tensors, so nothing computed from a
    snapshot can receive gradient.
    """

    def __init__(self, net: EmbeddingNet):
        arrays = OrderedDict()
        for k, v in net.params.items():
            a = v.data.copy()
            a.setflags(write=False)
            arrays[k] = a
        self._arrays = arrays
        self._n_layers = net.n_layers
        self.class_ids = tuple(net.class_ids)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def feature_dim(self) -> int:
        return self._arrays[f"ext{self._n_layers - 1}.W"].shape[1]

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return self._arrays

    def forward(self, batch) -> Tuple[Tensor, Tensor]:
        x = batch.data if isinstance(batch, Tensor) else batch
        feats, logits = _forward_numpy(self._arrays, self._n_layers, x)
        return Tensor(feats), Tensor(logits)

    __call__ = forward

    def features(self, x: np.ndarray) -> np.ndarray:
        return _forward_numpy(self._arrays, self._n_layers, x)[0]

    def thaw(self) -> EmbeddingNet:
        """Trainable copy of the snapshot's parameters."""
        return EmbeddingNet(OrderedDict((k, v.copy()) for k, v in self._arrays.items()), self.class_ids)


def snapshot(net: EmbeddingNet) -> FrozenSnapshot:
    return FrozenSnapshot(net)


def extend_classifier(
    net: EmbeddingNet,
    new_class_ids: Sequence[int],
    seed: int = 0,
    init_std: float = NEW_HEAD_INIT_STD,
) -> EmbeddingNet:
    """Return a copy of ``net`` whose head has extra rows for ``new_class_ids``.

    The first ``n`` head columns and all extractor weights are copied
    exactly; new columns get N(0, init_std²) weights and zero bias.
    """
    m = len(new_class_ids)
    if m < 1:
        raise ValueError("extend_classifier needs at least one new class")
    overlap = set(net.class_ids) & {int(c) for c in new_class_ids}
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} are already in the head")
    rng = np.random.default_rng(seed)
    arrays = OrderedDict((k, v.data.copy()) for k, v in net.params.items())
    d = net.feature_dim
    arrays["head.W"] = np.concatenate([arrays["head.W"], rng.normal(0.0, init_std, size=(d, m))], axis=1)
    arrays["head.b"] = np.concatenate([arrays["head.b"], np.zeros(m)])
    return EmbeddingNet(arrays, [*net.class_ids, *new_class_ids])


def parameter_distance(a, b) -> float:
    """Euclidean distance between two parameter sets with matching shapes."""
    total = 0.0
    for (ka, va), (kb, vb) in zip(a.arrays().items(), b.arrays().items()):
        if ka != kb or va.shape != vb.shape:
            raise DimensionError(f"parameter {ka}{va.shape} vs {kb}{vb.shape}")
        total += float(np.sum((va - vb) ** 2))
    return float(np.sqrt(total))


# ------------------------------------------------------------------- file io
def save_params(net, path) -> None:
    """Write parameters as ``INCR`` binary: header, then named float64 arrays.

    Layout (little-endian): magic ``INCR``, u32 version, u32 array count,
    u32 class count followed by i64 class ids; then per array a u32 name
    length, utf-8 name, u32 rank, u32 extents, and raw float64 values.
    """
    arrays = net.arrays()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(arrays))
    out += struct.pack("<I", len(net.class_ids))
    out += np.asarray(net.class_ids, dtype="<i8").tobytes()
    for name, value in arrays.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path) -> EmbeddingNet:
    buf = Path(path).read_bytes()
    try:
        return _parse_params(buf, path)
    except (struct.error, ValueError) as exc:
        if str(exc).startswith(str(path)):
            raise
        raise ValueError(f"{path}: truncated or corrupt parameter file ({exc})") from None


def _parse_params(buf: bytes, path) -> EmbeddingNet:
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an INCR parameter file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    (n_classes,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    class_ids = np.frombuffer(buf, dtype="<i8", count=n_classes, offset=pos).tolist()
    pos += 8 * n_classes
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return EmbeddingNet(arrays, class_ids)
