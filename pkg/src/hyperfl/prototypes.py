"""Uniformly separated class prototypes, frozen on the Poincare ball.

The construction has two stages:

1. place C unit vectors on the sphere by minimizing the largest pairwise
   cosine similarity (the classic Tammes-style uniformity objective, in
   matrix form: L = mean_i max_j (W W^T - 2 I)_ij, rows kept unit-norm), and
2. contract the unit configuration radially by a slope factor s so the
   prototypes sit strictly inside the ball.

The resulting PrototypeSet is immutable and is shared verbatim with every
client; prediction is geodesic-nearest-prototype against it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hyperfl.poincare import EPS_BALL

_PROTO_MAGIC = b"HFPROTO1"


@dataclass(frozen=True)
class PrototypeSet:
    """C fixed class prototypes of dimension n, every row at norm ``slope``."""

    weights: np.ndarray  # (C, n) ball coordinates
    slope: float
    seed: int = -1

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ValueError("prototype matrix must be (C, n) with C >= 2")
        norms = np.linalg.norm(w, axis=1)
        if np.any(np.abs(norms - self.slope) > 1e-9):
            raise ValueError("every prototype row must have norm equal to slope")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def to_bytes(self) -> bytes:
        header = struct.pack("<qqdq", self.num_classes, self.dim, self.slope, self.seed)
        body = self.weights.astype("<f8").tobytes(order="C")
        return _PROTO_MAGIC + header + body


@dataclass
class TammesReport:
    """Diagnostics from one uniformity optimization."""

    final_loss: float
    max_pairwise_cosine: float
    iterations: int
    converged: bool
    loss_trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class TammesConfig:
    """Projected-gradient settings for the uniformity optimization.

    The step size stays at ``lr`` for the first ``hold_frac`` of the budget
    and then decays geometrically to ``lr_final``; the hard-max subgradient
    oscillates at the step-size scale near the optimum, so the decay is what
    sets the final accuracy.
    """

    lr: float = 0.1
    max_iters: int = 2000
    tol: float = 1e-7  # best-loss improvement below this counts as flat
    patience: int = 50  # consecutive flat steps (in the decay phase) to stop
    hold_frac: float = 0.5
    lr_final: float = 1e-6


def _check_unit_rows(w: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("expected a (C, n) matrix")
    norms = np.linalg.norm(w, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("rows must be unit norm")
    return w


def tammes_loss(w: np.ndarray) -> float:
    """Mean over rows of the largest off-diagonal cosine similarity.

    The -2I shift pushes the self-similarity to -1 so the row max picks the
    worst *pair* for each prototype.
    """
    w = _check_unit_rows(w)
    m = w @ w.T - 2.0 * np.eye(w.shape[0])
    return float(np.mean(np.max(m, axis=1)))


def tammes_loss_grad(w: np.ndarray) -> np.ndarray:
    """Subgradient of tammes_loss; only the per-row argmax entries carry
    gradient, ties broken toward the lowest column index (np.argmax)."""
    w = np.asarray(w, dtype=np.float64)
    c = w.shape[0]
    m = w @ w.T - 2.0 * np.eye(c)
    grad = np.zeros_like(w)
    for i in range(c):
        j = int(np.argmax(m[i]))
        if j == i:  # degenerate: every pair already at cosine -1
            grad[i] += 2.0 * w[i] / c
        else:
            grad[i] += w[j] / c
            grad[j] += w[i] / c
    return grad


def max_pairwise_cosine(w: np.ndarray) -> float:
    m = w @ w.T - 2.0 * np.eye(w.shape[0])
    return float(np.max(m))


def _normalize_rows(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def random_unit_rows(c: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """C unit vectors sampled isotropically; degenerate draws are redrawn."""
    w = rng.standard_normal((c, n))
    norms = np.linalg.norm(w, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        w[bad] = rng.standard_normal((int(np.sum(bad)), n))
        norms = np.linalg.norm(w, axis=1)
    return w / norms[:, None]


def optimize_prototypes(
    c: int, n: int, seed: int, cfg: TammesConfig = TammesConfig()
) -> tuple[np.ndarray, TammesReport]:
    """Minimize the uniformity loss over C unit vectors in R^n.

    Projected subgradient descent: ambient step, then row renormalization.
    The best iterate seen so far is tracked and returned; only improving
    steps enter the loss trace, so the recorded trace is non-increasing.
    converged=True means the final cfg.patience iterations brought no
    improvement of cfg.tol or more; a budget that ends while the loss is
    still moving reports converged=False with the best-so-far result.
    """
    if c < 2 or n < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    w = random_unit_rows(c, n, rng)
    best_w = w.copy()
    best_loss = tammes_loss(w)
    trace = [best_loss]
    hold = int(cfg.max_iters * cfg.hold_frac)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.max_iters - hold, 1))
    lr = cfg.lr
    last_progress = 0
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        if iterations > hold:
            lr *= decay
        w = _normalize_rows(w - lr * tammes_loss_grad(w))
        loss = tammes_loss(w)
        improvement = best_loss - loss
        if improvement >= 0:
            best_loss = loss
            best_w = w.copy()
            trace.append(loss)
        if improvement >= cfg.tol:
            last_progress = iterations
    converged = iterations - last_progress >= cfg.patience
    report = TammesReport(
        final_loss=best_loss,
        max_pairwise_cosine=max_pairwise_cosine(best_w),
        iterations=iterations,
        converged=converged,
        loss_trace=trace,
    )
    return best_w, report


def contract(w_unit: np.ndarray, s: float, seed: int = -1) -> PrototypeSet:
    """Scale a unit-row configuration radially by slope s.

    s must lie in (0, 1 - EPS_BALL]: s = 1 would pin the prototypes on the
    open ball's boundary where the distance diverges.  Scaling leaves all
    pairwise cosines unchanged.
    """
    w_unit = _check_unit_rows(w_unit)
    if not 0.0 < s <= 1.0 - EPS_BALL:
        raise ValueError(f"slope must be in (0, {1.0 - EPS_BALL}], got {s}")
    return PrototypeSet(weights=s * w_unit, slope=s, seed=seed)


def build_prototypes(
    c: int, n: int, slope: float, seed: int, cfg: TammesConfig = TammesConfig()
) -> tuple[PrototypeSet, TammesReport]:
    """Optimize a uniform unit configuration and contract it by ``slope``."""
    w_unit, report = optimize_prototypes(c, n, seed, cfg)
    return contract(w_unit, slope, seed=seed), report


def random_prototypes(c: int, n: int, slope: float, seed: int) -> PrototypeSet:
    """Random (non-optimized) prototypes at radius ``slope``; used by the
    ablation variants that drop the uniformity stage."""
    rng = np.random.default_rng(seed)
    return contract(random_unit_rows(c, n, rng), slope, seed=seed)


def save_prototypes(protos: PrototypeSet, path: str | Path) -> None:
    Path(path).write_bytes(protos.to_bytes())


def load_prototypes(path: str | Path) -> PrototypeSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(_PROTO_MAGIC):
        raise ValueError(f"{path}: not a prototype file")
    offset = len(_PROTO_MAGIC)
    header_size = struct.calcsize("<qqdq")
    if len(raw) < offset + header_size:
        raise ValueError(f"{path}: truncated prototype header")
    c, n, slope, seed = struct.unpack_from("<qqdq", raw, offset)
    body = raw[offset + header_size :]
    expected = c * n * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    w = np.frombuffer(body, dtype="<f8").reshape(c, n).astype(np.float64)
    return PrototypeSet(weights=w, slope=slope, seed=int(seed))
