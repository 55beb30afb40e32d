"""Training orchestration, evaluation, checkpoints, ablations, and sweeps."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import align as A
from . import knowledge as K
from .data import DatasetSplit, MtsSample, patch_batch, read_samples
from .metrics import MetricsReport, compute_metrics
from .optim import AdamState, adam_step
from .signal import SensorEncoderConfig, SignalBranch, seeded_rng
from .tensor import ShapeError, Tensor, as_dtype, gradients, reshape, concat

SWEEP_VALUES = (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
ABLATION_VARIANTS = (
    "full",
    "no_knowledge",
    "no_node",
    "no_node_sensor",
    "no_node_label",
    "no_edge",
    "index_prompt",
)
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass
class AblationSwitches:
    no_knowledge: bool = False
    no_node: bool = False
    no_node_sensor: bool = False
    no_node_label: bool = False
    no_edge: bool = False
    index_prompt: bool = False

    @classmethod
    def for_variant(cls, variant: str) -> "AblationSwitches":
        if variant not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
        switches = cls()
        if variant != "full":
            setattr(switches, variant, True)
        return switches


@dataclasses.dataclass
class TrainConfig:
    task: str  # "classification" | "regression"
    encoder: SensorEncoderConfig
    patch_size: int
    loss: A.LossWeights = dataclasses.field(default_factory=A.LossWeights)
    window: int = 2
    n_classes: int | None = None
    class_names: list[str] | None = None
    category: str = "signal class"
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    seeds: list[int] = dataclasses.field(default_factory=lambda: list(range(10)))
    precision: str = "float64"
    embed_dim: int = 512
    embeddings_path: str | None = None
    fallback_seed: int = 0
    ablation: AblationSwitches = dataclasses.field(default_factory=AblationSwitches)
    train_path: str | None = None
    validation_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and not self.n_classes:
            raise ValueError("classification needs n_classes")
        expected_downstream = "cross_entropy" if self.task == "classification" else "mse_regression"
        if self.loss.downstream != expected_downstream:
            self.loss = dataclasses.replace(self.loss, downstream=expected_downstream)

    def effective_weights(self) -> A.LossWeights:
        """Loss weights after applying the ablation switches."""
        w = self.loss
        s = self.ablation
        lam_s, lam_l, lam_e = w.lambda_s, w.lambda_l, w.lambda_e
        if s.no_knowledge:
            lam_s = lam_l = lam_e = 0.0
        if s.no_node:
            lam_s = lam_l = 0.0
        if s.no_node_sensor:
            lam_s = 0.0
        if s.no_node_label:
            lam_l = 0.0
        if s.no_edge:
            lam_e = 0.0
        return dataclasses.replace(w, lambda_s=lam_s, lambda_l=lam_l, lambda_e=lam_e)


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model assembly


class KLinkModel:
    """Both branches plus the alignment projections, under one parameter registry."""

    def __init__(self, config: TrainConfig, n_sensors: int, n_patches: int):
        dtype = as_dtype(config.precision)
        n_outputs = config.n_classes if config.task == "classification" else 1
        self.config = config
        self.n_sensors = n_sensors
        self.n_patches = n_patches
        self.signal = SignalBranch(
            config.encoder,
            n_sensors,
            n_patches,
            config.patch_size,
            n_outputs,
            window=config.window,
            seed=config.seed,
            dtype=dtype,
        )
        self.heads = K.MappingHeads.create(
            config.encoder.hidden_dim,
            seeded_rng(config.seed, "knowledge.heads"),
            embed_dim=config.embed_dim,
            dtype=dtype,
        )
        self.proj = A.AlignmentProjection.create(
            config.encoder.hidden_dim, seeded_rng(config.seed, "alignment.proj"), dtype=dtype
        )

    def parameters(self) -> dict[str, Tensor]:
        out = self.signal.parameters()
        out["knowledge.sensor_map"] = self.heads.sensor
        out["knowledge.label_map"] = self.heads.label
        out["alignment.w_m"] = self.proj.w_m
        out["alignment.w_r"] = self.proj.w_r
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus batchnorm running statistics."""
        out = {name: p.data for name, p in self.parameters().items()}
        for name, state in self.signal.bn_states().items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_tensors()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise ShapeError(f"checkpoint is missing tensors: {missing[:4]}")
        for name, p in self.parameters().items():
            stored = np.asarray(tensors[name], dtype=p.dtype)
            if stored.shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint tensor {name!r} has shape {stored.shape}, model expects {p.data.shape}"
                )
            p.data = stored.copy()
        for name, state in self.signal.bn_states().items():
            state.running_mean = np.asarray(tensors[f"{name}.running_mean"], dtype=state.running_mean.dtype).copy()
            state.running_var = np.asarray(tensors[f"{name}.running_var"], dtype=state.running_var.dtype).copy()


# ---------------------------------------------------------------------------
# checkpoints


@dataclasses.dataclass
class Checkpoint:
    version: int
    config_hash: str
    epoch: int
    tensors: dict[str, np.ndarray]
    optimizer: dict

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            self.version,
            self.config_hash,
            self.epoch,
            {k: v.copy() for k, v in self.tensors.items()},
            copy.deepcopy(self.optimizer),
        )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = {
        "version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "tensors": {
            name: {"shape": list(arr.shape), "values": arr.ravel(order="C").tolist()}
            for name, arr in ckpt.tensors.items()
        },
        "optimizer": {
            "step": ckpt.optimizer["step"],
            "learning_rate": ckpt.optimizer["learning_rate"],
            "first_moment": {k: v.tolist() for k, v in ckpt.optimizer["first_moment"].items()},
            "second_moment": {k: v.tolist() for k, v in ckpt.optimizer["second_moment"].items()},
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['version']}")
    tensors = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    optimizer = {
        "step": payload["optimizer"]["step"],
        "learning_rate": payload["optimizer"]["learning_rate"],
        "first_moment": {k: np.asarray(v) for k, v in payload["optimizer"]["first_moment"].items()},
        "second_moment": {k: np.asarray(v) for k, v in payload["optimizer"]["second_moment"].items()},
    }
    return Checkpoint(payload["version"], payload["config_hash"], payload["epoch"], tensors, optimizer)


# ---------------------------------------------------------------------------
# batch loss


def _label_values(samples: Sequence[MtsSample], task: str) -> np.ndarray:
    if task == "classification":
        return np.array([int(s.label) for s in samples])
    return np.array([float(s.label) for s in samples])


def _label_texts(samples: Sequence[MtsSample], config: TrainConfig) -> list[str]:
    names = config.class_names
    return [
        K.render_label(int(s.label) if config.task == "classification" else float(s.label), names)
        for s in samples
    ]


def batch_loss(
    model: KLinkModel,
    samples: Sequence[MtsSample],
    table: K.EmbeddingTable | None,
    sensor_embeddings: np.ndarray,
) -> Tensor:
    """Combined training loss for one batch (both branches)."""
    config = model.config
    weights = config.effective_weights()
    patches = patch_batch(samples, config.patch_size)
    fwd = model.signal.forward(patches, training=True)
    labels = _label_values(samples, config.task)
    if config.task == "classification":
        downstream = A.cross_entropy_loss(fwd.output, labels)
    else:
        downstream = A.mse_regression_loss(fwd.output, labels)

    knowledge_active = weights.lambda_s != 0 or weights.lambda_l != 0 or weights.lambda_e != 0
    sensor_losses: list[Tensor] = []
    edge_losses: list[Tensor] = []
    label_loss = None
    if knowledge_active:
        sensor_part = K.map_sensor_prompts(sensor_embeddings, model.heads)
        label_texts = _label_texts(samples, config)
        graphs = []
        for text in label_texts:
            prompts = K.build_prompts(
                [str(i) for i in range(model.n_sensors)],  # names unused with precomputed part
                model.n_patches,
                config.category,
                text,
                index_prompts=False,
            )
            graphs.append(
                K.build_knowledge_graph(
                    prompts, table, model.heads, config.fallback_seed, sensor_part=sensor_part
                )
            )
        for a in range(len(samples)):
            if weights.lambda_s != 0:
                sensor_losses.append(
                    A.sensor_level_loss(
                        fwd.node_features[a], sensor_part, model.proj, weights.tau, weights.similarity
                    )
                )
            if weights.lambda_e != 0:
                edge_losses.append(A.edge_loss(fwd.graph.edges[a], graphs[a].edges))
        if weights.lambda_l != 0:
            stacked = concat([reshape(g.node_features, (1, -1, 2 * model.heads.hidden_dim)) for g in graphs], axis=0)
            label_loss = A.label_level_loss(fwd.node_features, stacked, model.proj, weights.tau, weights.similarity)
    return A.combined_loss(downstream, sensor_losses, label_loss, edge_losses, weights)


def sensor_prompt_embeddings(
    sensor_names: Sequence[str],
    n_patches: int,
    table: K.EmbeddingTable | None,
    fallback_seed: int,
    embed_dim: int,
    index_prompts: bool = False,
) -> np.ndarray:
    prompts = K.build_prompts(sensor_names, n_patches, "unused", "unused", index_prompts=index_prompts)
    return K.embed_many(prompts.flat_sensor_prompts(), table, fallback_seed, embed_dim)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: KLinkModel, samples: Sequence[MtsSample], chunk: int = 128) -> np.ndarray:
    """Signal-branch predictions in evaluation mode (knowledge branch unused)."""
    outputs = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo : lo + chunk]
        patches = patch_batch(part, model.config.patch_size)
        out = model.signal.forward(patches, training=False).output.data
        outputs.append(out)
    stacked = np.concatenate(outputs, axis=0)
    if model.config.task == "classification":
        return stacked.argmax(axis=1)
    return stacked.reshape(-1)


def evaluate_model(model: KLinkModel, samples: Sequence[MtsSample]) -> dict[str, float]:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    predictions = predict(model, samples)
    labels = _label_values(samples, model.config.task)
    return compute_metrics(model.config.task, labels, predictions, model.config.n_classes)


def evaluate(
    checkpoint: Checkpoint, samples: Sequence[MtsSample], config: TrainConfig
) -> MetricsReport:
    """Rebuild the model from a checkpoint and score it on a split."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    n_patches = samples[0].length // config.patch_size
    model = KLinkModel(config, samples[0].n_sensors, n_patches)
    model.load_state(checkpoint.tensors)
    return MetricsReport(config.task, {config.seed: evaluate_model(model, samples)})


def within_group_mass(edges: np.ndarray, groups: Sequence[int], n_sensors: int, n_patches: int) -> float:
    """Fraction of total edge mass between nodes whose sensors share a group."""
    n_nodes = n_sensors * n_patches
    if edges.shape != (n_nodes, n_nodes):
        raise ShapeError(f"edges shape {edges.shape} != ({n_nodes}, {n_nodes})")
    node_group = np.array([groups[i % n_sensors] for i in range(n_nodes)])
    same = node_group[:, None] == node_group[None, :]
    return float(edges[same].sum() / n_nodes)


def mean_within_group_mass(
    model: KLinkModel, samples: Sequence[MtsSample], groups: Sequence[int], chunk: int = 128
) -> float:
    """Average within-group edge mass of eval-mode signal graphs."""
    total, count = 0.0, 0
    for lo in range(0, len(samples), chunk):
        part = samples[lo : lo + chunk]
        patches = patch_batch(part, model.config.patch_size)
        fwd = model.signal.forward(patches, training=False)
        for a in range(len(part)):
            total += within_group_mass(
                fwd.graph.edges.data[a], groups, model.n_sensors, model.n_patches
            )
            count += 1
    return total / count


def dump_node_features(model: KLinkModel, samples: Sequence[MtsSample], path: str | Path) -> None:
    """Raw eval-mode node features, one JSON record per sample."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for lo in range(0, len(samples), 128):
            part = samples[lo : lo + 128]
            patches = patch_batch(part, model.config.patch_size)
            fwd = model.signal.forward(patches, training=False)
            for a, sample in enumerate(part):
                record = {
                    "id": sample.sample_id,
                    "label": sample.label if isinstance(sample.label, int) else float(sample.label),
                    "features": fwd.node_features.data[a].tolist(),
                }
                fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: MetricsReport
    epoch_losses: list[float]
    best_epoch: int


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot feed the batch-contrastive term; drop it
    return [c for c in chunks if len(c) > 1 or batch_size == 1]


def load_split_from_config(config: TrainConfig) -> DatasetSplit:
    if not (config.train_path and config.validation_path and config.test_path):
        raise ValueError("config does not carry dataset paths; pass a DatasetSplit explicitly")
    return DatasetSplit(
        read_samples(config.train_path),
        read_samples(config.validation_path),
        read_samples(config.test_path),
        (0.0, 0.0, 0.0),
        config.seed,
    )


def train(
    config: TrainConfig,
    split: DatasetSplit | None = None,
    table: K.EmbeddingTable | None = None,
) -> TrainResult:
    """Run the two-branch training loop and return the best-validation checkpoint.

    The knowledge branch participates only through the loss; validation
    and the returned report use the signal branch alone.
    """
    if split is None:
        split = load_split_from_config(config)
    if table is None and config.embeddings_path:
        table = K.load_table(config.embeddings_path)
    if not split.train or not split.validation:
        raise ValueError("train and validation splits must be non-empty")

    first = split.train[0]
    n_patches = first.length // config.patch_size
    model = KLinkModel(config, first.n_sensors, n_patches)
    params = model.parameters()
    adam = AdamState.create(params, learning_rate=config.learning_rate)
    shuffle_rng = seeded_rng(config.seed, "train.shuffle")

    sensor_emb = sensor_prompt_embeddings(
        first.sensor_names,
        n_patches,
        table,
        config.fallback_seed,
        config.embed_dim,
        index_prompts=config.ablation.index_prompt,
    )

    hash_ = config_hash(config)
    best: Checkpoint | None = None
    best_metric = None
    best_epoch = -1
    higher_is_better = config.task == "classification"
    select_key = "accuracy" if higher_is_better else "score"
    epoch_losses: list[float] = []

    for epoch in range(config.epochs):
        losses = []
        for batch_no, idx in enumerate(_batches(len(split.train), config.batch_size, shuffle_rng)):
            batch = [split.train[i] for i in idx]
            loss = batch_loss(model, batch, table, sensor_emb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            grads = dict(zip(params.keys(), gradients(loss, list(params.values()))))
            adam_step(adam, params, grads)
            losses.append(value)
        epoch_losses.append(float(np.mean(losses)))

        metric = evaluate_model(model, split.validation)[select_key]
        better = best_metric is None or (metric > best_metric if higher_is_better else metric < best_metric)
        if better:
            best_metric = metric
            best_epoch = epoch
            best = Checkpoint(
                version=CHECKPOINT_VERSION,
                config_hash=hash_,
                epoch=epoch,
                tensors={k: v.copy() for k, v in model.state_tensors().items()},
                optimizer={
                    "step": adam.step,
                    "learning_rate": adam.learning_rate,
                    "first_moment": {k: v.copy() for k, v in adam.first_moment.items()},
                    "second_moment": {k: v.copy() for k, v in adam.second_moment.items()},
                },
            )

    assert best is not None
    model.load_state(best.tensors)
    report = MetricsReport(config.task, {config.seed: evaluate_model(model, split.validation)})
    return TrainResult(best, report, epoch_losses, best_epoch)


# ---------------------------------------------------------------------------
# ablations and sweeps


def _with_variant(config: TrainConfig, variant: str, seed: int) -> TrainConfig:
    return dataclasses.replace(
        config, seed=seed, ablation=AblationSwitches.for_variant(variant)
    )


def run_ablation(
    config: TrainConfig,
    split: DatasetSplit,
    table: K.EmbeddingTable | None = None,
    seeds: Sequence[int] | None = None,
) -> dict[str, MetricsReport]:
    """Train and test the full model plus the six ablation variants."""
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    out: dict[str, MetricsReport] = {}
    for variant in ABLATION_VARIANTS:
        runs: dict[int, dict[str, float]] = {}
        for seed in seeds:
            cfg = _with_variant(config, variant, seed)
            result = train(cfg, split, table)
            runs[seed] = evaluate(result.checkpoint, split.test, cfg).per_seed[seed]
        out[variant] = MetricsReport(config.task, runs)
    return out


def sweep_lambda(
    config: TrainConfig,
    which: str,
    split: DatasetSplit,
    table: K.EmbeddingTable | None = None,
    values: Sequence[float] = SWEEP_VALUES,
    seeds: Sequence[int] | None = None,
) -> list[tuple[float, MetricsReport]]:
    """One report per candidate weight for the chosen alignment term."""
    field = {"S": "lambda_s", "L": "lambda_l", "E": "lambda_e"}.get(which)
    if field is None:
        raise ValueError(f"unknown lambda selector {which!r}, expected S, L, or E")
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    curve = []
    for value in values:
        runs: dict[int, dict[str, float]] = {}
        for seed in seeds:
            cfg = dataclasses.replace(
                config, seed=seed, loss=dataclasses.replace(config.loss, **{field: value})
            )
            result = train(cfg, split, table)
            runs[seed] = evaluate(result.checkpoint, split.test, cfg).per_seed[seed]
        curve.append((float(value), MetricsReport(config.task, runs)))
    return curve


# ---------------------------------------------------------------------------
# full-model gradient checking


def gradcheck_setup(
    n_sensors: int = 3,
    n_patches: int = 2,
    batch: int = 2,
    hidden_dim: int = 4,
    patch_size: int = 4,
    seed: int = 0,
    embed_dim: int = 512,
):
    """Tiny two-branch combined loss for finite-difference validation.

    Returns (loss_fn, params); every alignment term carries a non-zero
    weight so all gradient paths are exercised.
    """
    # moderate temperature and weights keep |loss| small: the batch-2
    # label-level term has structurally zero gradients in part of w_r, and
    # central-difference noise there grows with the loss magnitude
    config = TrainConfig(
        task="classification",
        n_classes=2,
        encoder=SensorEncoderConfig([1, 3], 2, hidden_dim, []),
        patch_size=patch_size,
        loss=A.LossWeights(tau=1.0, lambda_s=0.05, lambda_l=0.05, lambda_e=0.5),
        window=min(2, n_patches),
        batch_size=batch,
        seed=seed,
        embed_dim=embed_dim,
        category="signal class",
        class_names=["low", "high"],
    )
    rng = np.random.default_rng(seed)
    length = n_patches * patch_size
    samples = [
        MtsSample(
            rng.uniform(0, 1, size=(n_sensors, length)),
            int(i % 2),
            [f"sensor {i}" for i in range(n_sensors)],
            f"gc-{i}",
        )
        for i in range(batch)
    ]
    model = KLinkModel(config, n_sensors, n_patches)
    sensor_emb = sensor_prompt_embeddings(
        [f"sensor {i}" for i in range(n_sensors)], n_patches, None, config.fallback_seed, embed_dim
    )

    def loss_fn():
        return batch_loss(model, samples, None, sensor_emb)

    return loss_fn, model.parameters()
