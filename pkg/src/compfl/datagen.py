"""Federated datasets: synthetic generation, label-skew splits, file loaders
and reproducible mini-batch sampling."""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, ParseError

__all__ = [
    "GenConfig",
    "FederatedDataset",
    "BatchSampler",
    "generate_synthetic",
    "heterogeneous_label_split",
    "load_idx",
    "load_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class GenConfig:
    """Knobs of the synthetic heterogeneous generator.

    ``alpha`` controls how far client models spread around zero and ``beta``
    how far client feature means spread; both are variances. ``m`` is either
    one sample count shared by all clients or a per-client list.
    ``feature_scale`` multiplies every generated feature vector.
    """

    alpha: float = 0.0
    beta: float = 0.0
    n: int = 30
    d: int = 20
    m: Union[int, Sequence[int]] = 100
    label_model: str = "binary"
    classes: int = 4
    seed: int = 42
    noise_var: float = 0.1
    cov_decay: float = 1.2
    feature_scale: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidArgumentError("alpha and beta must be nonnegative")
        if self.n < 1 or self.d < 1:
            raise InvalidArgumentError("n and d must be positive")
        sizes = self.sizes()
        if len(sizes) != self.n or min(sizes) < 1:
            raise InvalidArgumentError("need a positive sample count for every client")
        if self.label_model not in ("binary", "multiclass"):
            raise InvalidArgumentError(f"unknown label model {self.label_model!r}")
        if self.label_model == "multiclass" and self.classes < 2:
            raise InvalidArgumentError("multiclass labels need at least 2 classes")
        if self.feature_scale <= 0:
            raise InvalidArgumentError("feature_scale must be positive")

    def sizes(self) -> list[int]:
        if np.isscalar(self.m):
            return [int(self.m)] * self.n
        return [int(v) for v in self.m]


@dataclass
class FederatedDataset:
    """Client shards plus a provenance record describing how they were made."""

    features: list
    labels: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.features) == 0 or len(self.features) != len(self.labels):
            raise InvalidArgumentError("dataset needs at least one shard and one label vector per shard")
        d = self.features[0].shape[1]
        for i, (X, y) in enumerate(zip(self.features, self.labels)):
            if X.ndim != 2 or X.shape[1] != d:
                raise InvalidArgumentError(f"shard {i} has inconsistent feature dimension")
            if X.shape[0] == 0 or X.shape[0] != len(y):
                raise InvalidArgumentError(f"shard {i} is empty or has mismatched labels")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [len(y) for y in self.labels]

    def pooled(self):
        return np.concatenate(self.features), np.concatenate(self.labels)


def generate_synthetic(cfg: GenConfig) -> FederatedDataset:
    """Draw a heterogeneous federated dataset.

    Client ``i`` gets a model ``w_i ~ N(u_i, I)`` with ``u_i ~ N(0, alpha I)``
    and a feature centre ``v_i ~ N(B_i 1, I)`` with ``B_i ~ N(0, beta)``.
    Samples are ``a ~ N(v_i, diag(j^-cov_decay))``. Binary labels are
    ``sign(a^T w_i + e)`` with ``e ~ N(0, noise_var)``. Multiclass labels are
    ``argmax(W_i^T (a - v_i) + e)``; centring keeps every class populated
    instead of letting the shared feature mean pick one winner. Each client draws from its own stream keyed by
    ``(seed, i)``.
    """
    sizes = cfg.sizes()
    std_diag = np.arange(1, cfg.d + 1, dtype=float) ** (-cfg.cov_decay / 2.0)
    noise_std = np.sqrt(cfg.noise_var)
    features, labels = [], []
    for i in range(cfg.n):
        rng = np.random.default_rng([cfg.seed, i])
        out_dim = 1 if cfg.label_model == "binary" else cfg.classes
        u = rng.normal(0.0, np.sqrt(cfg.alpha), size=(cfg.d, out_dim))
        w = rng.normal(u, 1.0)
        B = rng.normal(0.0, np.sqrt(cfg.beta))
        v = rng.normal(B, 1.0, size=cfg.d)
        A = v + rng.standard_normal((sizes[i], cfg.d)) * std_diag
        noise = rng.normal(0.0, noise_std, size=(sizes[i], out_dim))
        if cfg.label_model == "binary":
            y = np.where(A @ w[:, 0] + noise[:, 0] >= 0.0, 1.0, -1.0)
        else:
            y = np.argmax((A - v) @ w + noise, axis=1)
        features.append(A * cfg.feature_scale)
        labels.append(y)
    prov = {"generator": "synthetic", **asdict(cfg)}
    if not np.isscalar(cfg.m):
        prov["m"] = list(sizes)
    return FederatedDataset(features, labels, prov)


def heterogeneous_label_split(dataset, n: int, uniform_fraction: float, seed: int = 42) -> FederatedDataset:
    """Split pooled samples across ``n`` clients with label skew.

    A ``uniform_fraction`` of the samples is drawn at random and dealt out
    evenly; every remaining sample with label ``l`` goes to client ``l mod n``
    (0-based), so per-client totals generally differ.

    ``dataset`` is a :class:`FederatedDataset` (its shards are pooled) or a
    ``(features, labels)`` pair.
    """
    if isinstance(dataset, FederatedDataset):
        X, y = dataset.pooled()
        parent = dataset.provenance
        declared = parent.get("classes") if parent.get("label_model") == "multiclass" else None
    else:
        X, y = (np.asarray(a) for a in dataset)
        parent, declared = {}, None
    if not 0.0 <= uniform_fraction <= 1.0:
        raise InvalidArgumentError("uniform_fraction must lie in [0, 1]")
    labels_int = y.astype(np.intp)
    if np.any(labels_int != y) or labels_int.min() < 0:
        raise InvalidArgumentError("label-skew split needs nonnegative integer class labels")
    n_classes = max(int(labels_int.max()) + 1, int(declared or 0))
    if uniform_fraction < 1.0 and n > n_classes:
        raise InvalidArgumentError(f"label skew needs n <= number of classes ({n} > {n_classes})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_uniform = int(round(uniform_fraction * len(y)))
    uniform_part, rest = order[:n_uniform], order[n_uniform:]
    assigned = [list(chunk) for chunk in np.array_split(uniform_part, n)]
    for idx in np.sort(rest):
        assigned[labels_int[idx] % n].append(idx)
    features, shards = [], []
    for i, idx in enumerate(assigned):
        if len(idx) == 0:
            raise InvalidArgumentError(f"client {i} would receive no samples")
        idx = np.asarray(idx, dtype=np.intp)
        features.append(X[idx])
        shards.append(y[idx])
    prov = {"split": "label_skew", "n": n, "uniform_fraction": uniform_fraction, "seed": seed,
            "classes": n_classes, "parent": parent}
    return FederatedDataset(features, shards, prov)


def _read_exact(buf: bytes, offset: int, size: int, what: str, path):
    if offset + size > len(buf):
        raise ParseError(f"truncated file while reading {what} ({len(buf) - offset} of {size} bytes)",
                         offset=offset, path=path)
    return buf[offset:offset + size]


def load_idx(path, flatten: bool = True) -> np.ndarray:
    """Read an IDX file of unsigned bytes (the MNIST distribution format).

    Image files (magic ``0x00000803``) come back as floats scaled to [0, 1],
    one row per image when ``flatten`` is set. Label files (magic
    ``0x00000801``) come back as integer labels.
    """
    path = str(path)
    buf = Path(path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic number", path))
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ParseError(f"bad magic number 0x{magic:08x}", offset=0, path=path)
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, "dimension header", path))
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    raw = np.frombuffer(_read_exact(buf, start, count, "data", path), dtype=np.uint8).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    images = raw.astype(float) / 255.0
    return images.reshape(dims[0], -1) if flatten else images


def load_csv(path, header: Optional[bool] = None) -> np.ndarray:
    """Read a numeric CSV matrix.

    With ``header=None`` the first row is treated as a header only when it
    does not parse as numbers.
    """
    path = str(path)
    rows, width = [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                if lineno == 1 and header is not False:
                    continue
                raise ParseError(f"non-numeric value in row {row!r}", line=lineno, path=path) from None
            if lineno == 1 and header is True:
                continue
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"ragged row with {len(values)} fields, expected {width}",
                                 line=lineno, path=path)
            rows.append(values)
    if not rows:
        raise ParseError("no numeric rows", line=1, path=path)
    return np.asarray(rows, dtype=float)


class BatchSampler:
    """Deterministic mini-batch indices keyed by ``(seed, client, round, step)``.

    Every draw builds a counter-based Philox generator whose key is the seed
    and whose counter starts at ``(0, step, round, client)``, so the batch seen
    by one client never depends on how many draws other clients made or in
    which order they ran. Draws advance only the lowest counter word, so
    distinct keys never share random blocks.
    """

    def __init__(self, seed: int = 42):
        self.seed = int(seed)

    def next_batch(self, client: int, round: int, step: int, b: int, m: int) -> np.ndarray:
        if not 1 <= b <= m:
            raise InvalidArgumentError(f"batch size must satisfy 1 <= b <= m_i, got b={b}, m_i={m}")
        if b == m:
            return np.arange(m)
        if min(client, round, step) < 0:
            raise InvalidArgumentError("client, round and step must be nonnegative")
        bitgen = np.random.Philox(key=self.seed, counter=[0, step, round, client])
        return np.sort(np.random.Generator(bitgen).choice(m, size=b, replace=False))

    def __repr__(self):
        return f"BatchSampler(seed={self.seed})"
