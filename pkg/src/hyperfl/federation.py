"""Synchronous round-based orchestration.

One experiment is: build (or load) a dataset, hold out an IID global test
slice, partition the rest across K clients with a Dirichlet draw, split
each client pool 75/25 into local train/test, construct the frozen class
prototypes once, then iterate rounds of

    broadcast -> local triplet training on every client -> deviation
    aggregation (min-norm weights or data-weighted averaging) -> evaluation.

Two evaluations run every round: global accuracy of the aggregated model on
the held-out slice, and per-client accuracy of a locally finetuned copy on
each client's local test split.  Every random choice is derived from the
single master seed, so identical configurations reproduce bit-for-bit.

The four ablation variants each toggle exactly one mechanism:

* ``averaged``             -- data-weighted averaging instead of min-norm weights;
* ``geodesic_metric_only`` -- random (non-optimized) frozen shared prototypes;
* ``shared_only``          -- shared prototypes re-randomized every round;
* ``fixed_only``           -- per-client random frozen prototypes, not shared
                              (the server evaluates with its own random set).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hyperfl import aggregation as agg
from hyperfl import learner
from hyperfl.data import (
    ClientShard,
    LabeledDataset,
    PartitionSpec,
    dirichlet_partition,
    load_dataset,
    make_synthetic,
    partition_manifest,
    split_local,
    stratified_holdout,
)
from hyperfl.learner import ExtractorConfig, TripletConfig
from hyperfl.params import ParamVector, save_params
from hyperfl.prototypes import (
    PrototypeSet,
    TammesReport,
    build_prototypes,
    random_prototypes,
    save_prototypes,
)

log = logging.getLogger(__name__)

VARIANTS = ("geodesic_metric_only", "fixed_only", "shared_only", "averaged")

_AGGREGATORS = ("consistent", "averaged")
_METRICS = ("geodesic", "euclidean")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in hierarchical Gaussian generator."""

    num_classes: int
    dim: int
    per_class: int
    spread: float = 0.1
    hierarchy_depth: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSpec | str  # generator spec or path to a dataset file
    partition: PartitionSpec
    extractor: ExtractorConfig
    triplet: TripletConfig
    rounds: int
    slope: float = 0.9
    lr: float = 0.3
    local_epochs: int = 5
    batch_size: int = 128
    aggregator: str = "consistent"
    prototype_mode: str = "tammes_fixed"
    metric: str = "geodesic"
    seed: int = 0
    finetune_epochs: int = 5
    finetune_steps: int | None = None
    global_test_fraction: float = 0.2
    train_fraction: float = 0.75

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.aggregator not in _AGGREGATORS:
            raise ValueError(f"aggregator must be one of {_AGGREGATORS}")
        if self.prototype_mode != "tammes_fixed":
            raise ValueError("only the tammes_fixed prototype mode is supported")
        if self.metric not in _METRICS:
            raise ValueError(f"metric must be one of {_METRICS}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if not 0 < self.slope <= 1 - 1e-5:
            raise ValueError("slope must be in (0, 1 - 1e-5]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = (
            {"kind": "file", "path": self.dataset}
            if isinstance(self.dataset, str)
            else {"kind": "synthetic", **asdict(self.dataset)}
        )
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        ds = d.pop("dataset")
        if isinstance(ds, dict):
            kind = ds.pop("kind", "synthetic")
            dataset = ds["path"] if kind == "file" else SyntheticSpec(**ds)
        else:
            dataset = ds
        return ExperimentConfig(
            dataset=dataset,
            partition=PartitionSpec(**d.pop("partition")),
            extractor=ExtractorConfig(**_tupled(d.pop("extractor"), "hidden")),
            triplet=TripletConfig(**d.pop("triplet")),
            **d,
        )


def _tupled(d: dict, key: str) -> dict:
    d = dict(d)
    if key in d:
        d[key] = tuple(d[key])
    return d


@dataclass
class RoundRecord:
    round: int
    gfl_accuracy: float
    pfl_accuracy_mean: float
    pfl_accuracies: list[float | None]
    train_loss_mean: float
    p: list[float]
    cu_iterations: int
    wall_time_sec: float

    def __post_init__(self):
        accs = [self.gfl_accuracy, self.pfl_accuracy_mean]
        accs += [a for a in self.pfl_accuracies if a is not None]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError("accuracies must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        # wall time is deliberately excluded: the persisted metric stream is
        # byte-reproducible across runs, timings are written separately
        return {
            "round": self.round,
            "gfl_accuracy": self.gfl_accuracy,
            "pfl_accuracy_mean": self.pfl_accuracy_mean,
            "pfl_accuracies": self.pfl_accuracies,
            "train_loss_mean": self.train_loss_mean,
            "p": self.p,
            "cu_iterations": self.cu_iterations,
        }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    variant: str | None
    records: list[RoundRecord]
    global_params: ParamVector
    client_params: list[ParamVector]
    prototypes: PrototypeSet
    shards: list[ClientShard]
    global_test: LabeledDataset
    manifest: dict
    aggregation_log: list[dict]
    tammes_report: TammesReport | None = None


def derive_seed(master: int, *tags) -> int:
    """Stable nonnegative int64 child seed from the master seed and a tag path."""
    entropy = [int(master)]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(int.from_bytes(tag.encode("utf-8"), "little"))
        else:
            entropy.append(int(tag))
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    return int(state) & 0x7FFFFFFFFFFFFFFF


def evaluate_gfl(
    global_params: ParamVector,
    ext: ExtractorConfig,
    protos: PrototypeSet,
    test: LabeledDataset,
    metric: str = "geodesic",
) -> float:
    """Top-1 accuracy of the aggregated model on the held-out test slice."""
    if test.size == 0:
        raise ValueError("global test set is empty")
    pred = learner.predict_batch(global_params, ext, protos, test.features, metric)
    return float(np.mean(pred == test.labels))


def evaluate_pfl(
    global_params: ParamVector,
    shards: list[ClientShard],
    protos: PrototypeSet | list[PrototypeSet],
    ext: ExtractorConfig,
    tcfg: TripletConfig,
    lr: float,
    batch_size: int,
    finetune_epochs: int = 5,
    finetune_steps: int | None = None,
    seed: int = 0,
    metric: str = "geodesic",
) -> list[float | None]:
    """Per-client accuracy after finetuning a copy of the global model.

    Each client receives its own copy, finetunes on the local train split
    (epoch-granular by default; ``finetune_steps`` caps SGD steps instead
    when set) and is scored on the local test split.  Clients without a
    test split are skipped and reported as None.  The global parameters are
    never mutated.
    """
    proto_list = protos if isinstance(protos, list) else [protos] * len(shards)
    out: list[float | None] = []
    for shard, proto_k in zip(shards, proto_list):
        if shard.test is None or shard.test.size == 0:
            log.debug("client %d has no local test split; skipped in P-FL", shard.client_id)
            out.append(None)
            continue
        # with step-granular finetuning, one epoch per allowed step is always
        # enough for max_steps to bind
        epochs = finetune_epochs if finetune_steps is None else finetune_steps
        tuned = learner.local_train(
            global_params, shard, proto_k, ext, tcfg,
            epochs=epochs, batch_size=batch_size, lr=lr,
            seed=derive_seed(seed, "pfl", shard.client_id),
            metric=metric,
            max_steps=finetune_steps,
        )
        pred = learner.predict_batch(tuned, ext, proto_k, shard.test.features, metric)
        out.append(float(np.mean(pred == shard.test.labels)))
    return out


def _build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if isinstance(cfg.dataset, str):
        return load_dataset(cfg.dataset)
    spec = cfg.dataset
    return make_synthetic(
        num_classes=spec.num_classes,
        dim=spec.dim,
        per_class=spec.per_class,
        spread=spec.spread,
        hierarchy_depth=spec.hierarchy_depth,
        seed=derive_seed(cfg.seed, "data"),
    )


def _round_prototypes(
    cfg: ExperimentConfig, variant: str | None, num_classes: int, round_idx: int,
    num_clients: int,
) -> tuple[PrototypeSet, list[PrototypeSet], TammesReport | None]:
    """Server prototype set and the per-client sets for one round."""
    n = cfg.extractor.output_dim
    proto_seed = derive_seed(cfg.seed, "protos")
    if variant is None or variant == "averaged":
        server, report = build_prototypes(num_classes, n, cfg.slope, proto_seed)
        return server, [server] * num_clients, report
    if variant == "geodesic_metric_only":
        server = random_prototypes(num_classes, n, cfg.slope, proto_seed)
        return server, [server] * num_clients, None
    if variant == "shared_only":
        server = random_prototypes(
            num_classes, n, cfg.slope, derive_seed(cfg.seed, "protos", round_idx)
        )
        return server, [server] * num_clients, None
    if variant == "fixed_only":
        server = random_prototypes(
            num_classes, n, cfg.slope, derive_seed(cfg.seed, "protos", "server")
        )
        clients = [
            random_prototypes(num_classes, n, cfg.slope, derive_seed(cfg.seed, "protos", k))
            for k in range(num_clients)
        ]
        return server, clients, None
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def _run(
    cfg: ExperimentConfig,
    variant: str | None,
    out_dir: str | Path | None,
    round_hook=None,
) -> ExperimentResult:
    # Sub-config seeds (partition, triplet, extractor init) are mixed with the
    # master seed, so they act as deterministic offsets: one master seed fixes
    # the whole run, changing it reseeds everything.
    ds = _build_dataset(cfg)
    ext = ExtractorConfig(
        input_dim=cfg.extractor.input_dim,
        hidden=cfg.extractor.hidden,
        output_dim=cfg.extractor.output_dim,
        activation=cfg.extractor.activation,
        init_seed=derive_seed(cfg.seed, "init", cfg.extractor.init_seed),
    )
    if ext.input_dim != ds.dim:
        raise ValueError(f"extractor input_dim {ext.input_dim} != dataset dim {ds.dim}")

    pool, global_test = stratified_holdout(
        ds, cfg.global_test_fraction, seed=derive_seed(cfg.seed, "holdout")
    )
    pspec = PartitionSpec(
        num_clients=cfg.partition.num_clients,
        alpha=cfg.partition.alpha,
        seed=derive_seed(cfg.seed, "partition", cfg.partition.seed),
    )
    pools = dirichlet_partition(pool, pspec)
    shards = [
        split_local(pools[k], k, cfg.train_fraction, seed=derive_seed(cfg.seed, "split", k))
        for k in range(pspec.num_clients)
    ]
    manifest = partition_manifest(pools, pspec)

    tcfg = TripletConfig(
        margin=cfg.triplet.margin,
        negatives_per_sample=cfg.triplet.negatives_per_sample,
        seed=derive_seed(cfg.seed, "triplet", cfg.triplet.seed),
    )
    server_protos, client_protos, tammes_report = _round_prototypes(
        cfg, variant, ds.num_classes, 0, pspec.num_clients
    )
    frozen = variant != "shared_only"
    proto_bytes = server_protos.to_bytes() if frozen else None

    aggregator = "averaged" if variant == "averaged" else cfg.aggregator
    theta = learner.init_params(ext)
    counts = [shard.n_train for shard in shards]
    records: list[RoundRecord] = []
    agg_log: list[dict] = []

    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        if variant == "shared_only":
            server_protos, client_protos, _ = _round_prototypes(
                cfg, variant, ds.num_classes, t, pspec.num_clients
            )
        locals_: list[ParamVector] = []
        losses: list[float] = []
        for k, shard in enumerate(shards):
            theta_k = learner.local_train(
                theta, shard, client_protos[k], ext, tcfg,
                epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                seed=derive_seed(cfg.seed, "train", t, k), metric=cfg.metric,
            )
            locals_.append(theta_k)
            losses.append(
                learner.mean_triplet_loss(
                    theta_k, ext, shard.train, client_protos[k], tcfg.margin, cfg.metric
                )
            )
        dev = agg.compute_deviations(theta, locals_)
        if aggregator == "consistent":
            weights = agg.min_norm_weights(dev, counts)
        else:
            weights = agg.fedavg_weights(counts)
        theta_next = agg.aggregate(theta, dev, weights)

        # conservation re-check against an independently ordered accumulation
        acc = theta.values.copy()
        for k in range(len(locals_)):
            acc = acc + weights.p[k] * dev.deltas[k].values
        drift = float(np.max(np.abs(theta_next.values - acc)))
        if drift > 1e-12 * max(1.0, float(np.max(np.abs(acc)))):
            raise RuntimeError(f"round {t}: aggregation drifted from its definition ({drift})")
        theta_before, theta = theta, theta_next

        if frozen and server_protos.to_bytes() != proto_bytes:
            raise RuntimeError(f"round {t}: frozen prototypes changed")
        if round_hook is not None:
            round_hook(t, theta_before, locals_, weights, theta)

        gfl = evaluate_gfl(theta, ext, server_protos, global_test, cfg.metric)
        pfl = evaluate_pfl(
            theta, shards, client_protos if variant == "fixed_only" else server_protos,
            ext, tcfg, cfg.lr, cfg.batch_size,
            finetune_epochs=cfg.finetune_epochs, finetune_steps=cfg.finetune_steps,
            seed=derive_seed(cfg.seed, "pfl", t), metric=cfg.metric,
        )
        scored = [a for a in pfl if a is not None]
        record = RoundRecord(
            round=t,
            gfl_accuracy=gfl,
            pfl_accuracy_mean=float(np.mean(scored)) if scored else 0.0,
            pfl_accuracies=pfl,
            train_loss_mean=float(np.mean(losses)),
            p=[float(v) for v in weights.p],
            cu_iterations=weights.cu_iterations,
            wall_time_sec=time.perf_counter() - t0,
        )
        records.append(record)
        gap = weights.pareto_gap
        agg_log.append(
            {
                "round": t,
                "p": [float(v) for v in weights.p],
                "cu_iterations": weights.cu_iterations,
                "pareto_gap": None if np.isnan(gap) else float(gap),
                "gram_diagonal": [float(v) for v in np.diag(dev.gram)],
            }
        )

    result = ExperimentResult(
        config=cfg,
        variant=variant,
        records=records,
        global_params=theta,
        client_params=locals_,
        prototypes=server_protos,
        shards=shards,
        global_test=global_test,
        manifest=manifest,
        aggregation_log=agg_log,
        tammes_report=tammes_report,
    )
    if out_dir is not None:
        persist_result(result, out_dir)
    return result


def run_experiment(
    cfg: ExperimentConfig, out_dir: str | Path | None = None, round_hook=None
) -> ExperimentResult:
    """Run the full method: frozen uniform prototypes + min-norm aggregation.

    ``round_hook(t, theta_before, client_params, weights, theta_after)`` is
    invoked after each round when given; useful for auditing aggregation.
    """
    return _run(cfg, None, out_dir, round_hook)


def run_ablation(
    cfg: ExperimentConfig, variant: str, out_dir: str | Path | None = None, round_hook=None
) -> ExperimentResult:
    """Run one ablation variant; see the module docstring for the toggles."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return _run(cfg, variant, out_dir, round_hook)


def persist_result(result: ExperimentResult, out_dir: str | Path) -> None:
    """Write metrics, manifests and checkpoints.

    rounds.jsonl and the checkpoints are byte-reproducible for a fixed
    config+seed; wall-clock timings go to timing.jsonl instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")
    with open(out / "timing.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps({"round": rec.round, "wall_time_sec": rec.wall_time_sec}) + "\n")
    with open(out / "aggregation.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.aggregation_log:
            fh.write(json.dumps(entry) + "\n")
    manifest = {
        "variant": result.variant,
        "config": result.config.to_dict(),
        "partition": result.manifest,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    save_prototypes(result.prototypes, out / "prototypes.bin")
    save_params(result.global_params, out / "global.params")
    for k, params in enumerate(result.client_params):
        save_params(params, out / f"client_{k:03d}.params")
    final = result.records[-1]
    summary = {
        "rounds": len(result.records),
        "final_gfl_accuracy": final.gfl_accuracy,
        "final_pfl_accuracy_mean": final.pfl_accuracy_mean,
        "final_train_loss_mean": final.train_loss_mean,
        "total_wall_time_sec": sum(r.wall_time_sec for r in result.records),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
