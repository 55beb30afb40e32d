"""Sensor encoding, spatio-temporal graph construction, and windowed message passing."""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Sequence

import numpy as np

from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm1d,
    concat,
    conv1d,
    matmul,
    maxpool1d,
    mean,
    relu,
    reshape,
    scale,
    softmax_rows,
    swap_last,
)


@dataclasses.dataclass
class SensorEncoderConfig:
    """Structure of the per-sensor CNN encoder and the downstream head."""

    block_channels: list[int]  # e.g. [1, 64, 48]; first entry must be 1
    kernel: int
    hidden_dim: int
    head_hidden: list[int]  # hidden widths of the output map, may be empty

    def __post_init__(self):
        if self.block_channels[0] != 1:
            raise ValueError("sensor slices are single-channel; block_channels must start with 1")
        if any(c < 1 for c in self.block_channels) or self.hidden_dim < 1:
            raise ValueError("channel counts and hidden_dim must be positive")

    def pooled_lengths(self, patch_size: int) -> list[int]:
        """Per-block lengths after pooling; raises naming the block that hits zero."""
        lengths = []
        length = patch_size
        for i in range(len(self.block_channels) - 1):
            length = length // 2  # conv keeps length, pool halves it
            if length < 1:
                raise ShapeError(f"patch length pools to zero in block {i} (patch size {patch_size})")
            lengths.append(length)
        return lengths


def seeded_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per parameter name; init order can't shift draws."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def _param(seed: int, name: str, shape: tuple[int, ...], std: float, dtype) -> Tensor:
    data = seeded_rng(seed, name).normal(scale=std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


@dataclasses.dataclass
class ConvBlock:
    # no conv bias: batchnorm's mean subtraction cancels it exactly, beta takes its place
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclasses.dataclass
class SensorEncoder:
    cfg: SensorEncoderConfig
    blocks: list[ConvBlock]
    proj_weight: Tensor  # (flattened conv features, hidden_dim)
    proj_bias: Tensor


def build_encoder(cfg: SensorEncoderConfig, patch_size: int, seed: int, dtype=np.float64) -> SensorEncoder:
    lengths = cfg.pooled_lengths(patch_size)
    blocks = []
    for i, (c_in, c_out) in enumerate(zip(cfg.block_channels, cfg.block_channels[1:])):
        fan_in = c_in * cfg.kernel
        blocks.append(
            ConvBlock(
                weight=_param(seed, f"encoder.block{i}.conv.weight", (c_out, c_in, cfg.kernel), np.sqrt(2.0 / fan_in), dtype),
                gamma=Tensor(np.ones(c_out, dtype=dtype), requires_grad=True),
                beta=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
                state=BatchNormState.create(c_out, dtype=dtype),
            )
        )
    flat = cfg.block_channels[-1] * lengths[-1]
    return SensorEncoder(
        cfg=cfg,
        blocks=blocks,
        proj_weight=_param(seed, "encoder.proj.weight", (flat, cfg.hidden_dim), np.sqrt(2.0 / flat), dtype),
        proj_bias=Tensor(np.zeros(cfg.hidden_dim, dtype=dtype), requires_grad=True),
    )


def encode_sensors(patches: np.ndarray, encoder: SensorEncoder, training: bool = True) -> Tensor:
    """Encode each (sensor, patch) slice independently to hidden_dim features.

    ``patches`` is (patch_count, N, f) for one sample or (B, patch_count,
    N, f) for a batch; output rows follow patch-major node order.
    """
    arr = np.asarray(patches)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"encode_sensors: expected (B, patches, N, f), got {arr.shape}")
    batch, n_patches, n_sensors, patch_len = arr.shape
    dtype = encoder.proj_weight.dtype
    x = Tensor(arr.reshape(batch * n_patches * n_sensors, 1, patch_len).astype(dtype))
    for block in encoder.blocks:
        x = conv1d(x, block.weight, Tensor(np.zeros(block.weight.shape[0], dtype=dtype)))
        x = batchnorm1d(x, block.gamma, block.beta, block.state, training=training)
        x = maxpool1d(x)
        x = relu(x)
    flat = reshape(x, (batch * n_patches * n_sensors, -1))
    if flat.shape[1] != encoder.proj_weight.shape[0]:
        raise ShapeError(
            f"encode_sensors: flattened width {flat.shape[1]} != projection input {encoder.proj_weight.shape[0]}"
        )
    features = add(matmul(flat, encoder.proj_weight), encoder.proj_bias)
    out = reshape(features, (batch, n_patches * n_sensors, encoder.cfg.hidden_dim))
    return reshape(out, (n_patches * n_sensors, encoder.cfg.hidden_dim)) if single else out


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(n_patches: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos of the 0-based patch index, one row per patch."""
    position = np.arange(n_patches, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * (2 * np.arange(half) / dim))
    table = np.zeros((n_patches, dim))
    table[:, 0::2] = np.sin(position * freqs)
    table[:, 1::2] = np.cos(position * freqs[: dim // 2])
    return table.astype(dtype)


def add_positional_encoding(z: Tensor, n_patches: int, n_sensors: int) -> Tensor:
    """Add the patch-index encoding to every node of that patch."""
    dim = z.shape[-1]
    table = positional_encoding(n_patches, dim, z.dtype)
    per_node = np.repeat(table, n_sensors, axis=0)  # node order is patch-major
    return add(z, Tensor(per_node))


# ---------------------------------------------------------------------------
# graph construction


@dataclasses.dataclass
class SpatioTemporalGraph:
    """Fully-connected graph over (sensor, patch) nodes.

    Tensors carry an optional leading batch axis; ``edges`` rows are
    softmax-normalized over the full node set.
    """

    node_features: Tensor  # (..., N*patches, d_h)
    edge_logits: Tensor  # (..., N*patches, N*patches)
    edges: Tensor
    n_sensors: int
    n_patches: int

    @property
    def n_nodes(self) -> int:
        return self.n_sensors * self.n_patches


def construct_graph(z: Tensor, w_s: Tensor, n_sensors: int, n_patches: int) -> SpatioTemporalGraph:
    """Edges from dot products of linearly projected node features."""
    if z.shape[-2] != n_sensors * n_patches:
        raise ShapeError(f"construct_graph: {z.shape[-2]} rows != {n_sensors}*{n_patches} nodes")
    projected = matmul(z, w_s)
    logits = matmul(projected, swap_last(projected))
    return SpatioTemporalGraph(z, logits, softmax_rows(logits), n_sensors, n_patches)


# ---------------------------------------------------------------------------
# windowed message passing


@dataclasses.dataclass
class MpnnResult:
    node_updated: Tensor  # (..., N*patches, d_h), window updates merged per node
    pooled: Tensor  # (..., N*floor(patches/M), d_h), temporal mean-pool blocks


def window_edges(graph: SpatioTemporalGraph, window: int) -> list[Tensor]:
    """Row-stochastic edge matrices restricted to each moving window."""
    n, lhat = graph.n_sensors, graph.n_patches
    m = int(window)
    if not 1 <= m <= lhat:
        raise ShapeError(f"window {m} invalid for {lhat} patches")
    out = []
    for w in range(lhat - m + 1):
        lo, hi = w * n, (w + m) * n
        out.append(softmax_rows(graph.edge_logits[..., lo:hi, lo:hi]))
    return out


def mpnn_forward(graph: SpatioTemporalGraph, window: int, w_g: Tensor, b_g: Tensor) -> MpnnResult:
    """Message passing inside moving windows of ``window`` patches (stride 1).

    Edge rows are re-softmaxed within each window, neighbor features are
    aggregated and passed through an affine+relu update. A node covered
    by several windows takes the mean of its per-window updates; temporal
    pooling then averages non-overlapping blocks of ``window`` patches,
    leaving one row per (pool block, sensor).
    """
    n, lhat = graph.n_sensors, graph.n_patches
    m = int(window)
    n_windows = lhat - m + 1
    updates = []
    for w, sub_edges in enumerate(window_edges(graph, m)):
        lo, hi = w * n, (w + m) * n
        aggregated = matmul(sub_edges, graph.node_features[..., lo:hi, :])
        updates.append(relu(add(matmul(aggregated, w_g), b_g)))

    per_patch = []
    for t in range(lhat):
        covering = range(max(0, t - m + 1), min(t, n_windows - 1) + 1)
        slices = [updates[w][..., (t - w) * n : (t - w + 1) * n, :] for w in covering]
        merged = slices[0]
        for extra in slices[1:]:
            merged = add(merged, extra)
        per_patch.append(scale(merged, 1.0 / len(slices)))
    node_updated = concat(per_patch, axis=-2)

    blocks = []
    for p in range(lhat // m):
        block = per_patch[p * m]
        for t in range(p * m + 1, (p + 1) * m):
            block = add(block, per_patch[t])
        blocks.append(scale(block, 1.0 / m))
    pooled = concat(blocks, axis=-2)
    return MpnnResult(node_updated=node_updated, pooled=pooled)


# ---------------------------------------------------------------------------
# readout and task head


def build_head(widths: Sequence[int], seed: int, dtype=np.float64) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
        layers.append(
            (
                _param(seed, f"head.{i}.weight", (w_in, w_out), np.sqrt(2.0 / w_in), dtype),
                Tensor(np.zeros(w_out, dtype=dtype), requires_grad=True),
            )
        )
    return layers


def readout_and_head(features: Tensor, head: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Concatenate node rows in index order, then apply the affine stack.

    ReLU between layers, none after the last; a (B, rows, d) input yields
    (B, out), a single (rows, d) input yields (out,).
    """
    single = features.ndim == 2
    rows, dim = features.shape[-2], features.shape[-1]
    flat = reshape(features, (rows * dim,) if single else (features.shape[0], rows * dim))
    expected = head[0][0].shape[0]
    if rows * dim != expected:
        raise ShapeError(f"readout width {rows * dim} != head input width {expected}")
    out = reshape(flat, (1, -1)) if single else flat
    for i, (w, b) in enumerate(head):
        out = add(matmul(out, w), b)
        if i < len(head) - 1:
            out = relu(out)
    return reshape(out, (head[-1][0].shape[1],)) if single else out


# ---------------------------------------------------------------------------
# assembled branch


@dataclasses.dataclass
class SignalForward:
    node_features: Tensor
    graph: SpatioTemporalGraph
    mpnn: MpnnResult
    output: Tensor


class SignalBranch:
    """Owns the signal-side parameters and runs the full per-batch pass."""

    def __init__(
        self,
        cfg: SensorEncoderConfig,
        n_sensors: int,
        n_patches: int,
        patch_size: int,
        n_outputs: int,
        window: int = 2,
        seed: int = 0,
        dtype=np.float64,
    ):
        if not 1 <= window <= n_patches:
            raise ShapeError(f"window {window} invalid for {n_patches} patches")
        self.cfg = cfg
        self.n_sensors = n_sensors
        self.n_patches = n_patches
        self.patch_size = patch_size
        self.window = window
        self.encoder = build_encoder(cfg, patch_size, seed, dtype)
        d = cfg.hidden_dim
        self.w_s = _param(seed, "graph.w_s", (d, d), 1.0 / np.sqrt(d), dtype)
        self.w_g = _param(seed, "mpnn.w_g", (d, d), 1.0 / np.sqrt(d), dtype)
        self.b_g = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        pooled_rows = n_sensors * (n_patches // window)
        self.head_widths = [pooled_rows * d, *cfg.head_hidden, n_outputs]
        self.head = build_head(self.head_widths, seed, dtype)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.encoder.blocks):
            out[f"encoder.block{i}.conv.weight"] = block.weight
            out[f"encoder.block{i}.bn.gamma"] = block.gamma
            out[f"encoder.block{i}.bn.beta"] = block.beta
        out["encoder.proj.weight"] = self.encoder.proj_weight
        out["encoder.proj.bias"] = self.encoder.proj_bias
        out["graph.w_s"] = self.w_s
        out["mpnn.w_g"] = self.w_g
        out["mpnn.b_g"] = self.b_g
        for i, (w, b) in enumerate(self.head):
            out[f"head.{i}.weight"] = w
            out[f"head.{i}.bias"] = b
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        return {f"encoder.block{i}.bn": block.state for i, block in enumerate(self.encoder.blocks)}

    def forward(self, patches: np.ndarray, training: bool = True) -> SignalForward:
        z = encode_sensors(patches, self.encoder, training=training)
        z = add_positional_encoding(z, self.n_patches, self.n_sensors)
        graph = construct_graph(z, self.w_s, self.n_sensors, self.n_patches)
        result = mpnn_forward(graph, self.window, self.w_g, self.b_g)
        output = readout_and_head(result.pooled, self.head)
        return SignalForward(z, graph, result, output)
