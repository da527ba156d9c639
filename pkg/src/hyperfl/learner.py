"""Client-side training: extractor, hyperbolic triplet objective, local SGD.

A small MLP maps raw features to tangent vectors at the ball origin; the
exp map projects them into the ball, where the triplet hinge

    max(d(exp0(z), w_y) - d(exp0(z), w_neg) + margin, 0)

pulls each sample toward its class prototype and pushes it from a randomly
sampled negative prototype.  Negatives are drawn uniformly over the *full*
class set minus the true label, so classes absent from a client's shard
still shape its representation.

All gradients are analytic (chain rule through the exp map and the distance
formula); the optimizer is plain SGD.  The prototypes are frozen, so every
trainable parameter lives in flat Euclidean space and no manifold-aware
update is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyperfl import poincare
from hyperfl.data import ClientShard, LabeledDataset
from hyperfl.params import ParamVector
from hyperfl.poincare import TangentVector
from hyperfl.prototypes import PrototypeSet

_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture of the feature extractor (input -> hidden... -> tangent)."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 3.0
    negatives_per_sample: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives_per_sample < 1:
            raise ValueError("need at least one negative per sample")


def layout_for(cfg: ExtractorConfig):
    dims = cfg.dims
    layout = []
    for i in range(len(dims) - 1):
        layout.append((f"w{i}", (dims[i + 1], dims[i])))
        layout.append((f"b{i}", (dims[i + 1],)))
    return tuple(layout)


def init_params(cfg: ExtractorConfig) -> ParamVector:
    """Glorot-uniform weights, zero biases, seeded by cfg.init_seed."""
    rng = np.random.default_rng(cfg.init_seed)
    dims = cfg.dims
    named = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        named.append((f"w{i}", rng.uniform(-limit, limit, size=(fan_out, fan_in))))
        named.append((f"b{i}", np.zeros(fan_out)))
    return ParamVector.from_tensors(named)


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_prime_from_output(h: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the post-activation value
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (h > 0).astype(np.float64)
    return np.ones_like(h)


def _forward_cached(theta: ParamVector, cfg: ExtractorConfig, x: np.ndarray):
    tensors = theta.tensors()
    n_layers = len(cfg.dims) - 1
    acts = [x]
    h = x
    for i in range(n_layers):
        a = h @ tensors[f"w{i}"].T + tensors[f"b{i}"]
        h = _act(a, cfg.activation) if i < n_layers - 1 else a
        acts.append(h)
    return acts[-1], acts, tensors


def forward_batch(theta: ParamVector, cfg: ExtractorConfig, x: np.ndarray) -> np.ndarray:
    """Tangent-space features for a (B, input_dim) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected (B, {cfg.input_dim}) inputs, got {x.shape}")
    z, _, _ = _forward_cached(theta, cfg, x)
    return z


def extract(theta: ParamVector, cfg: ExtractorConfig, x: np.ndarray) -> TangentVector:
    """Feature representation of a single input as a tangent vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != cfg.input_dim:
        raise ValueError(f"expected a length-{cfg.input_dim} input, got shape {x.shape}")
    return TangentVector(forward_batch(theta, cfg, x[None, :])[0])


def _backward(cfg: ExtractorConfig, acts, tensors, d_out: np.ndarray) -> ParamVector:
    n_layers = len(cfg.dims) - 1
    grads: dict[str, np.ndarray] = {}
    delta = d_out
    for i in reversed(range(n_layers)):
        grads[f"w{i}"] = delta.T @ acts[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ tensors[f"w{i}"]) * _act_prime_from_output(
                acts[i], cfg.activation
            )
    named = []
    for i in range(n_layers):
        named.append((f"w{i}", grads[f"w{i}"]))
        named.append((f"b{i}", grads[f"b{i}"]))
    return ParamVector.from_tensors(named)


def _distances(points: np.ndarray, protos: PrototypeSet, metric: str) -> np.ndarray:
    if metric == "geodesic":
        return poincare.distance_to_set_arr(points, protos.weights)
    if metric == "euclidean":
        return poincare.euclidean_distance_to_set_arr(points, protos.weights)
    raise ValueError(f"unknown metric {metric!r}")


def _distance_grad(points: np.ndarray, targets: np.ndarray, metric: str) -> np.ndarray:
    if metric == "geodesic":
        return poincare.dist_grad_wrt_point_arr(points, targets)
    return poincare.euclidean_grad_wrt_point_arr(points, targets)


def sample_negative(y: int, num_classes: int, rng: np.random.Generator) -> int:
    """Uniform draw over the full class set excluding the true label."""
    if num_classes < 2:
        raise ValueError("need at least two classes to sample a negative")
    j = int(rng.integers(num_classes - 1))
    return j + 1 if j >= y else j


def triplet_loss(
    z: TangentVector,
    y: int,
    protos: PrototypeSet,
    neg: int,
    margin: float,
    metric: str = "geodesic",
) -> float:
    """Hinge on the gap between the positive- and negative-prototype distances."""
    c = protos.num_classes
    if not (0 <= y < c and 0 <= neg < c):
        raise ValueError("class indices out of range")
    if y == neg:
        raise ValueError("negative class must differ from the true class")
    p = poincare.exp_map_origin_arr(z.coords[None, :])
    d = _distances(p, protos, metric)[0]
    return float(max(d[y] - d[neg] + margin, 0.0))


def triplet_grad(
    theta: ParamVector,
    cfg: ExtractorConfig,
    x: np.ndarray,
    y: np.ndarray,
    protos: PrototypeSet,
    tcfg: TripletConfig,
    rng: np.random.Generator | None = None,
    metric: str = "geodesic",
) -> tuple[float, ParamVector]:
    """Batch-mean triplet loss and its analytic gradient in theta.

    Per sample the loss averages tcfg.negatives_per_sample independently
    drawn negatives.  Samples whose hinge is inactive contribute nothing to
    the gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if cfg.output_dim != protos.dim:
        raise ValueError("extractor output dimension must match the prototypes")
    if rng is None:
        rng = np.random.default_rng(tcfg.seed)
    b = x.shape[0]
    c = protos.num_classes

    z, acts, tensors = _forward_cached(theta, cfg, x)
    p = poincare.exp_map_origin_arr(z)
    d_all = _distances(p, protos, metric)
    d_pos = d_all[np.arange(b), y]
    w_pos = protos.weights[y]

    loss_acc = np.zeros(b)
    d_p_acc = np.zeros_like(p)
    grad_pos = _distance_grad(p, w_pos, metric)
    for _ in range(tcfg.negatives_per_sample):
        neg = np.array([sample_negative(int(label), c, rng) for label in y])
        gap = d_pos - d_all[np.arange(b), neg] + tcfg.margin
        active = gap > 0.0
        loss_acc += np.maximum(gap, 0.0)
        if np.any(active):
            grad_neg = _distance_grad(p[active], protos.weights[neg[active]], metric)
            d_p_acc[active] += grad_pos[active] - grad_neg
    scale = 1.0 / (b * tcfg.negatives_per_sample)
    loss = float(np.sum(loss_acc) * scale)
    d_z = poincare.exp_map_origin_jvp_transpose_arr(z, d_p_acc * scale)
    return loss, _backward(cfg, acts, tensors, d_z)


def mean_triplet_loss(
    theta: ParamVector,
    cfg: ExtractorConfig,
    ds: LabeledDataset,
    protos: PrototypeSet,
    margin: float,
    metric: str = "geodesic",
) -> float:
    """Deterministic loss metric: the hinge averaged over *all* negative
    classes per sample (the expectation of the sampled objective)."""
    z = forward_batch(theta, cfg, ds.features)
    p = poincare.exp_map_origin_arr(z)
    d_all = _distances(p, protos, metric)
    idx = np.arange(ds.size)
    d_pos = d_all[idx, ds.labels]
    gaps = np.maximum(d_pos[:, None] - d_all + margin, 0.0)
    gaps[idx, ds.labels] = 0.0
    return float(np.mean(np.sum(gaps, axis=1) / (protos.num_classes - 1)))


def local_train(
    theta_in: ParamVector,
    shard: ClientShard,
    protos: PrototypeSet,
    cfg: ExtractorConfig,
    tcfg: TripletConfig,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int = 0,
    metric: str = "geodesic",
    max_steps: int | None = None,
) -> ParamVector:
    """Mini-batch SGD on the local training split.

    One RNG (from ``seed``) drives both the per-epoch shuffle and the
    negative sampling, so a run is reproducible bit-for-bit.  ``max_steps``
    optionally caps the number of SGD steps across all epochs (used for
    step-granular finetuning).
    """
    rng = np.random.default_rng(seed)
    theta = theta_in.copy()
    train = shard.train
    n = train.size
    if n == 0:
        raise ValueError(f"client {shard.client_id}: empty training split")
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if max_steps is not None and steps >= max_steps:
                return theta
            idx = order[start : start + batch_size]
            _, grad = triplet_grad(
                theta, cfg, train.features[idx], train.labels[idx], protos, tcfg,
                rng=rng, metric=metric,
            )
            theta.values -= lr * grad.values
            steps += 1
    return theta


def predict_batch(
    theta: ParamVector,
    cfg: ExtractorConfig,
    protos: PrototypeSet,
    x: np.ndarray,
    metric: str = "geodesic",
) -> np.ndarray:
    """Nearest-prototype labels for a batch; ties go to the lowest class."""
    z = forward_batch(theta, cfg, x)
    p = poincare.exp_map_origin_arr(z)
    return np.argmin(_distances(p, protos, metric), axis=1)


def predict(
    theta: ParamVector,
    cfg: ExtractorConfig,
    protos: PrototypeSet,
    x: np.ndarray,
    metric: str = "geodesic",
) -> int:
    x = np.asarray(x, dtype=np.float64)
    return int(predict_batch(theta, cfg, protos, x[None, :], metric)[0])
