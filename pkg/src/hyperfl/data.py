"""Datasets, non-IID partitioning, and local train/test splits.

Synthetic data is C Gaussian clusters around mutually separated centers,
optionally with nested sub-clusters so the classes carry hierarchical
structure.  Partitioning follows the Dirichlet recipe: for every class an
allocation over the K clients is drawn from Dir(alpha) and the class's
instances are dealt out by those proportions (largest-remainder rounding),
so small alpha produces skewed shards and missing classes.

Dataset file format (UTF-8 text): one header line "N d C", then N lines of
d feature values followed by an integer label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a nonempty (N, d) matrix")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be one per feature row")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    """One client's local data; ``test`` is None when the pool was too small
    to hold anything back (flagged at split time)."""

    client_id: int
    train: LabeledDataset
    test: LabeledDataset | None

    @property
    def n_train(self) -> int:
        return self.train.size


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    num_clients: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def _class_centers(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    # Orthonormal directions when they fit; random unit directions otherwise.
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return q.T.copy()
    w = rng.standard_normal((num_classes, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def make_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    hierarchy_depth: int = 0,
    seed: int = 0,
) -> LabeledDataset:
    """Gaussian class clusters with optional nested sub-clusters.

    Each level of hierarchy splits a cluster into two sub-clusters whose
    centers are offset at half the scale of the level above; the leaf noise
    uses the deepest scale.  Every offset is proportional to ``spread``, so
    spread = 0 collapses each class onto its center exactly.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2 and per_class >= 1")
    if spread < 0 or hierarchy_depth < 0:
        raise ValueError("spread and hierarchy_depth must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = _class_centers(num_classes, dim, rng)
    feats = np.empty((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    for c in range(num_classes):
        block = centers[c] + np.zeros((per_class, dim))
        if hierarchy_depth > 0:
            leaves = rng.integers(2**hierarchy_depth, size=per_class)
            for level in range(1, hierarchy_depth + 1):
                offsets = rng.normal(0.0, spread * 0.5 ** (level - 1), size=(2**level, dim))
                node = leaves >> (hierarchy_depth - level)
                block += offsets[node]
        block += rng.normal(0.0, spread * 0.5**hierarchy_depth, size=(per_class, dim))
        feats[c * per_class : (c + 1) * per_class] = block
    return LabeledDataset(feats, labels, num_classes)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` matching ``weights`` proportions."""
    ideal = weights * total
    counts = np.floor(ideal).astype(np.int64)
    shortfall = total - int(counts.sum())
    if shortfall > 0:
        order = np.argsort(-(ideal - counts), kind="stable")
        counts[order[:shortfall]] += 1
    return counts


def dirichlet_partition(ds: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Deal every instance to exactly one client, class by class.

    Per class a Dir(alpha) draw (normalized Gamma variates) fixes the client
    proportions; largest-remainder rounding converts them to counts.  Empty
    clients are repaired by stealing a single instance from the currently
    largest shard so that every client can train (logged when triggered).
    """
    k = spec.num_clients
    rng = np.random.default_rng(spec.seed)
    assigned: list[list[int]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        gamma = rng.gamma(spec.alpha, 1.0, size=k)
        if gamma.sum() <= 0:  # underflow guard for very small alpha
            gamma = np.ones(k)
        counts = _largest_remainder(gamma / gamma.sum(), idx.size)
        start = 0
        for client, cnt in enumerate(counts):
            assigned[client].extend(idx[start : start + cnt].tolist())
            start += cnt
    for client in range(k):
        if assigned[client]:
            continue
        sizes = [len(a) for a in assigned]
        donor = int(np.argmax(sizes))
        if sizes[donor] < 2:
            log.warning("client %d left empty: no shard has an instance to spare", client)
            continue
        assigned[client].append(assigned[donor].pop())
        log.warning("client %d was empty; moved one instance from client %d", client, donor)
    pools = []
    for client in range(k):
        idx = np.array(sorted(assigned[client]), dtype=np.int64)
        if idx.size == 0:
            raise ValueError(f"client {client} has no data (dataset smaller than client count)")
        pools.append(ds.subset(idx))
    return pools


def _stratified_train_mask(labels: np.ndarray, num_classes: int, target_train: int,
                           rng: np.random.Generator) -> np.ndarray:
    n = labels.size
    frac = target_train / n
    present = [np.flatnonzero(labels == c) for c in range(num_classes)]
    class_sizes = np.array([p.size for p in present], dtype=np.float64)
    ideal = class_sizes * frac
    take = np.floor(ideal).astype(np.int64)
    shortfall = target_train - int(take.sum())
    if shortfall > 0:
        order = np.argsort(-(ideal - take), kind="stable")
        for c in order:
            if shortfall == 0:
                break
            if take[c] < class_sizes[c]:
                take[c] += 1
                shortfall -= 1
        # distribute any leftover wherever capacity remains
        for c in range(num_classes):
            while shortfall > 0 and take[c] < class_sizes[c]:
                take[c] += 1
                shortfall -= 1
    mask = np.zeros(n, dtype=bool)
    for c in range(num_classes):
        chosen = rng.permutation(present[c])[: take[c]]
        mask[chosen] = True
    return mask


def split_local(
    pool: LabeledDataset,
    client_id: int,
    train_fraction: float = 0.75,
    seed: int = 0,
) -> ClientShard:
    """Stratified-where-possible random split of a client pool.

    The train share is round(train_fraction * N), clamped so that both
    splits are nonempty whenever N >= 2.  A single-instance pool goes
    entirely to train with an empty (None) test split, flagged in the log.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = pool.size
    if n == 1:
        log.warning("client %d has a single instance; no local test split", client_id)
        return ClientShard(client_id=client_id, train=pool, test=None)
    target = int(np.floor(train_fraction * n + 0.5))
    target = min(max(target, 1), n - 1)
    rng = np.random.default_rng(seed)
    mask = _stratified_train_mask(pool.labels, pool.num_classes, target, rng)
    return ClientShard(
        client_id=client_id,
        train=pool.subset(np.flatnonzero(mask)),
        test=pool.subset(np.flatnonzero(~mask)),
    )


def stratified_holdout(
    ds: LabeledDataset, holdout_fraction: float, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Split off an IID slice (e.g. a global test set): returns (rest, slice)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in (0, 1)")
    n = ds.size
    target_rest = min(max(int(np.floor((1.0 - holdout_fraction) * n + 0.5)), 1), n - 1)
    rng = np.random.default_rng(seed)
    mask = _stratified_train_mask(ds.labels, ds.num_classes, target_rest, rng)
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


def partition_manifest(pools: list[LabeledDataset], spec: PartitionSpec) -> dict:
    """Per-client class counts plus the partition settings, for run records."""
    return {
        "num_clients": spec.num_clients,
        "alpha": spec.alpha,
        "seed": spec.seed,
        "client_class_counts": [pool.class_counts().tolist() for pool in pools],
        "client_sizes": [pool.size for pool in pools],
    }


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    lines = [f"{ds.size} {ds.dim} {ds.num_classes}"]
    for i in range(ds.size):
        row = " ".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{row} {int(ds.labels[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class DatasetFormatError(ValueError):
    """A labeled-vector file failed to parse; the message names the record."""


def load_dataset(path: str | Path) -> LabeledDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 3:
        raise DatasetFormatError(f"{path}: header must be 'N d C', got {lines[0]!r}")
    try:
        n, d, c = (int(tok) for tok in header)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-integer header field: {exc}") from exc
    if n < 1 or d < 1 or c < 1:
        raise DatasetFormatError(f"{path}: header values must be positive")
    if len(lines) - 1 < n:
        raise DatasetFormatError(
            f"{path}: truncated file, header promises {n} records but only "
            f"{len(lines) - 1} are present"
        )
    feats = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        tokens = lines[1 + i].split()
        if len(tokens) != d + 1:
            raise DatasetFormatError(
                f"{path}: record {i} has {len(tokens)} fields, expected {d + 1}"
            )
        try:
            row = np.array([float(tok) for tok in tokens[:d]])
            label = int(tokens[d])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: record {i}: {exc}") from exc
        if not np.all(np.isfinite(row)):
            raise DatasetFormatError(f"{path}: record {i}: non-finite feature value")
        if not 0 <= label < c:
            raise DatasetFormatError(
                f"{path}: record {i}: label {label} outside [0, {c})"
            )
        feats[i] = row
        labels[i] = label
    return LabeledDataset(feats, labels, c)
