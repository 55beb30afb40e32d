"""Prompt generation, embedding lookup, and the knowledge-link graph."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, softmax_rows, swap_last

EMBED_DIM = 512

SENSOR_PROMPT_TEMPLATE = "A sensor of {name} at the {t} timestamp"
LABEL_PROMPT_TEMPLATE = "The {category} is {label}"


@dataclasses.dataclass
class PromptSet:
    """Sensor prompts for every (patch, sensor) node plus one label prompt."""

    sensor_prompts: list[list[str]]  # [patch][sensor]
    label_prompt: str
    category_phrase: str

    @property
    def n_patches(self) -> int:
        return len(self.sensor_prompts)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_prompts[0])

    def flat_sensor_prompts(self) -> list[str]:
        """Prompts in node order: patch-major, sensor-minor."""
        return [p for row in self.sensor_prompts for p in row]


def render_label(label, class_names: Sequence[str] | None = None) -> str:
    """Class labels render by name; regression labels as rounded integers."""
    if isinstance(label, (int, np.integer)) and class_names is not None:
        return class_names[int(label)]
    if isinstance(label, str):
        return label
    return str(int(round(float(label))))


def build_prompts(
    sensor_names: Sequence[str],
    n_patches: int,
    category_phrase: str,
    label_text: str,
    index_prompts: bool = False,
) -> PromptSet:
    """Render the prompt set; timestamps are 1-based patch indices.

    ``index_prompts`` swaps sensor names for their 1-based index (the
    name-free ablation variant).
    """
    if not sensor_names:
        raise ValueError("sensor_names must be non-empty")
    for name in sensor_names:
        if not str(name).strip():
            raise ValueError("empty sensor name")
    if not label_text:
        raise ValueError("label text must be renderable")
    rendered_names = (
        [str(i + 1) for i in range(len(sensor_names))] if index_prompts else [str(n) for n in sensor_names]
    )
    sensor_prompts = [
        [SENSOR_PROMPT_TEMPLATE.format(name=name, t=t + 1) for name in rendered_names]
        for t in range(n_patches)
    ]
    label_prompt = LABEL_PROMPT_TEMPLATE.format(category=category_phrase, label=label_text)
    return PromptSet(sensor_prompts, label_prompt, category_phrase)


# ---------------------------------------------------------------------------
# embedding table


@dataclasses.dataclass
class EmbeddingTable:
    """Frozen prompt-to-vector map; lookups are exact string matches."""

    encoder_id: str
    dim: int
    entries: dict[str, np.ndarray]
    warnings: list[str] = dataclasses.field(default_factory=list)

    def __contains__(self, prompt: str) -> bool:
        return prompt in self.entries


def load_table(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ValueError(f"{path}: missing header line")
        header = json.loads(header_line)
        dim = int(header["dim"])
        table = EmbeddingTable(str(header.get("encoder", "unknown")), dim, {})
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            vec = np.asarray(record["vec"], dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"{path}:{line_no}: vector length {vec.size} != dim {dim}")
            if record["prompt"] in table.entries:
                table.warnings.append(f"duplicate prompt at line {line_no}, last occurrence wins")
            table.entries[record["prompt"]] = vec
    return table


def save_table(path: str | Path, table: EmbeddingTable) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": table.dim, "encoder": table.encoder_id}) + "\n")
        for prompt, vec in table.entries.items():
            fh.write(json.dumps({"prompt": prompt, "vec": vec.tolist()}) + "\n")


def _fallback_vector(prompt: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    vec = gen.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def embed(prompt: str, table: EmbeddingTable | None, fallback_seed: int = 0, dim: int = EMBED_DIM) -> np.ndarray:
    """Exact table lookup; a miss yields a deterministic unit-norm vector."""
    if table is not None and prompt in table.entries:
        return table.entries[prompt]
    return _fallback_vector(prompt, fallback_seed, dim if table is None else table.dim)


def embed_many(
    prompts: Sequence[str], table: EmbeddingTable | None, fallback_seed: int = 0, dim: int = EMBED_DIM
) -> np.ndarray:
    return np.stack([embed(p, table, fallback_seed, dim) for p in prompts])


# ---------------------------------------------------------------------------
# mapping heads and graph


@dataclasses.dataclass
class MappingHeads:
    """Trainable maps from text-embedding space into the model's feature space."""

    sensor: Tensor  # (embed_dim, d_h)
    label: Tensor  # (embed_dim, d_h)

    @classmethod
    def create(cls, hidden_dim: int, rng: np.random.Generator, embed_dim: int = EMBED_DIM, dtype=np.float64):
        # prompt embeddings arrive ~unit norm, so scale by the output width
        # to keep mapped features (and their dot products) near unit size
        std = 1.0 / np.sqrt(hidden_dim)
        draw = lambda: Tensor(rng.normal(scale=std, size=(embed_dim, hidden_dim)).astype(dtype), requires_grad=True)
        return cls(draw(), draw())

    @property
    def embed_dim(self) -> int:
        return self.sensor.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.sensor.shape[1]


@dataclasses.dataclass
class KnowledgeGraph:
    """Prompt-derived node features and edges, indexed like the signal graph."""

    node_features: Tensor  # (N*patches, 2*d_h): [sensor part | label part]
    edge_logits: Tensor  # (N*patches, N*patches), symmetric dot products
    edges: Tensor  # row-softmaxed logits
    sensor_part: Tensor  # (N*patches, d_h)
    label_feature: Tensor  # (1, d_h)


def map_sensor_prompts(prompt_embeddings: np.ndarray, heads: MappingHeads) -> Tensor:
    """Project frozen sensor-prompt embeddings into the hidden space."""
    if prompt_embeddings.shape[1] != heads.embed_dim:
        raise ShapeError(
            f"embedding dim {prompt_embeddings.shape[1]} != mapping head input {heads.embed_dim}"
        )
    return matmul(Tensor(prompt_embeddings), heads.sensor)


def build_knowledge_graph(
    prompts: PromptSet,
    table: EmbeddingTable | None,
    heads: MappingHeads,
    fallback_seed: int = 0,
    sensor_part: Tensor | None = None,
) -> KnowledgeGraph:
    """Assemble the knowledge-link graph for one sample.

    Node features concatenate the mapped sensor-prompt feature with the
    mapped label-prompt feature; edges are row-softmaxed dot products so
    they share the signal graph's scale. ``sensor_part`` may be passed in
    when the caller already mapped the (sample-independent) sensor
    prompts.
    """
    if table is not None and table.dim != heads.embed_dim:
        raise ShapeError(f"table dim {table.dim} != mapping head input {heads.embed_dim}")
    if sensor_part is None:
        emb = embed_many(prompts.flat_sensor_prompts(), table, fallback_seed, heads.embed_dim)
        sensor_part = map_sensor_prompts(emb, heads)
    label_emb = embed(prompts.label_prompt, table, fallback_seed, heads.embed_dim)
    label_feature = matmul(Tensor(label_emb[None, :]), heads.label)  # (1, d_h)
    n_nodes = sensor_part.shape[0]
    tiled_label = matmul(Tensor(np.ones((n_nodes, 1), dtype=sensor_part.dtype)), label_feature)
    node_features = concat([sensor_part, tiled_label], axis=1)
    edge_logits = matmul(node_features, swap_last(node_features))
    return KnowledgeGraph(
        node_features=node_features,
        edge_logits=edge_logits,
        edges=softmax_rows(edge_logits),
        sensor_part=sensor_part,
        label_feature=label_feature,
    )


# ---------------------------------------------------------------------------
# synthetic embedding tables (group structure injected by construction)


def group_consistent_table(
    sensor_names: Sequence[str],
    groups: Sequence[int],
    n_patches: int,
    label_texts: Sequence[str],
    category_phrase: str,
    seed: int = 0,
    dim: int = EMBED_DIM,
    group_spread: float = 0.25,
    time_spread: float = 0.1,
) -> EmbeddingTable:
    """Embedding table whose sensor prompts cluster by correlation group.

    Same-group prompts share a base direction plus small per-sensor and
    per-timestamp offsets; label prompts get mutually independent
    directions. Stands in for a pretrained text encoder when validating
    knowledge transfer on synthetic corpora.
    """
    gen = np.random.Generator(np.random.Philox(key=seed))
    unit = lambda v: v / np.linalg.norm(v)
    group_base = {g: unit(gen.standard_normal(dim)) for g in sorted(set(groups))}
    sensor_off = [gen.standard_normal(dim) for _ in sensor_names]
    time_off = [gen.standard_normal(dim) for _ in range(n_patches)]
    entries: dict[str, np.ndarray] = {}
    for t in range(n_patches):
        for i, name in enumerate(sensor_names):
            prompt = SENSOR_PROMPT_TEMPLATE.format(name=name, t=t + 1)
            vec = group_base[groups[i]] + group_spread * unit(sensor_off[i]) + time_spread * unit(time_off[t])
            entries[prompt] = unit(vec)
    for text in label_texts:
        prompt = LABEL_PROMPT_TEMPLATE.format(category=category_phrase, label=text)
        entries[prompt] = unit(gen.standard_normal(dim))
    return EmbeddingTable("synthetic-group", dim, entries)
