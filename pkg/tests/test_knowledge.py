import math

import numpy as np
import pytest

from klink import knowledge as K
from klink.tensor import ShapeError, Tensor


def heads_for(d_h=4, seed=0, embed_dim=8):
    return K.MappingHeads.create(d_h, np.random.default_rng(seed), embed_dim=embed_dim)


# ---------------------------------------------------------------------------
# prompts


def test_sensor_prompt_template_literal():
    ps = K.build_prompts(["fan speed"], 3, "human activity", "walking")
    assert ps.sensor_prompts[2][0] == "A sensor of fan speed at the 3 timestamp"


def test_label_prompt_template_literal():
    ps = K.build_prompts(["a"], 1, "human activity", "walking")
    assert ps.label_prompt == "The human activity is walking"


def test_index_prompt_ablation_uses_one_based_indices():
    ps = K.build_prompts(["alpha", "beta"], 2, "c", "x", index_prompts=True)
    assert ps.sensor_prompts[0][1] == "A sensor of 2 at the 1 timestamp"


def test_prompt_counts():
    ps = K.build_prompts([f"s{i}" for i in range(4)], 3, "c", "x")
    assert len(ps.flat_sensor_prompts()) == 12
    assert ps.n_patches == 3 and ps.n_sensors == 4


def test_empty_sensor_name_rejected():
    with pytest.raises(ValueError, match="empty sensor name"):
        K.build_prompts(["ok", "  "], 1, "c", "x")


def test_render_label_regression_rounds():
    assert K.render_label(124.6) == "125"
    assert K.render_label(3, ["a", "b", "c", "d"]) == "d"


# ---------------------------------------------------------------------------
# embeddings


def test_table_lookup_returns_stored_vector():
    vec = np.arange(8, dtype=np.float64)
    table = K.EmbeddingTable("t", 8, {"p": vec})
    assert K.embed("p", table) is vec


def test_fallback_is_unit_norm():
    v = K.embed("unseen prompt", None, fallback_seed=3, dim=512)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-9
    assert v.shape == (512,)


def test_fallback_deterministic_across_runs():
    a = K.embed("some prompt", None, fallback_seed=7)
    b = K.embed("some prompt", None, fallback_seed=7)
    assert np.array_equal(a, b)
    c = K.embed("some prompt", None, fallback_seed=8)
    assert not np.array_equal(a, c)


def test_table_file_roundtrip_and_duplicate_warning(tmp_path):
    path = tmp_path / "table.jsonl"
    import json

    lines = [
        '{"dim": 4, "encoder": "enc-1"}',
        json.dumps({"prompt": "p1", "vec": np.linspace(0, 1, 4).tolist()}),
        '{"prompt": "p1", "vec": [9.0, 9.0, 9.0, 9.0]}',
        '{"prompt": "p2", "vec": [1.0, 2.0, 3.0, 4.0]}',
    ]
    path.write_text("\n".join(lines) + "\n")
    table = K.load_table(path)
    assert table.dim == 4 and table.encoder_id == "enc-1"
    assert len(table.entries) == 2
    assert np.array_equal(table.entries["p1"], [9.0, 9.0, 9.0, 9.0])  # last wins
    assert len(table.warnings) == 1

    out = tmp_path / "copy.jsonl"
    K.save_table(out, table)
    again = K.load_table(out)
    assert not again.warnings
    assert np.array_equal(again.entries["p2"], table.entries["p2"])


def test_table_dim_mismatch_rejected():
    table = K.EmbeddingTable("t", 16, {})
    heads = heads_for(embed_dim=8)
    ps = K.build_prompts(["a", "b"], 1, "c", "x")
    with pytest.raises(ShapeError, match="dim"):
        K.build_knowledge_graph(ps, table, heads)


# ---------------------------------------------------------------------------
# knowledge graph


def brute_softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_identical_prompt_vectors_give_uniform_edges():
    heads = heads_for()
    shared = np.random.default_rng(1).normal(size=8)
    table = K.EmbeddingTable("t", 8, {})
    ps = K.build_prompts(["a", "b", "c"], 2, "cat", "x")
    for p in ps.flat_sensor_prompts():
        table.entries[p] = shared
    table.entries[ps.label_prompt] = shared
    graph = K.build_knowledge_graph(ps, table, heads)
    n = 6
    assert np.allclose(graph.edges.data, 1.0 / n)


def test_orthogonal_sensor_parts_shared_label_logit_structure():
    # bypass the text pipeline: hand-set sensor part, check dot-product blocks
    d_h = 3
    heads = heads_for(d_h=d_h, embed_dim=4)
    sensor_part = Tensor(np.eye(3) * 2.0)  # orthogonal rows, norm 2
    table = K.EmbeddingTable("t", 4, {})
    ps = K.build_prompts(["a", "b", "c"], 1, "cat", "x")
    graph = K.build_knowledge_graph(ps, table, heads, sensor_part=sensor_part)
    label = graph.label_feature.data[0]
    logits = graph.edge_logits.data
    off = np.dot(label, label)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert np.isclose(logits[i, j], off)
            else:
                expected = 4.0 + off  # ||sensor row||^2 + ||label||^2
                assert np.isclose(logits[i, i], expected)


def test_four_node_edges_match_brute_force():
    g = np.random.default_rng(5)
    heads = heads_for(d_h=2, embed_dim=4, seed=5)
    ps = K.build_prompts(["a", "b"], 2, "cat", "y")
    graph = K.build_knowledge_graph(ps, None, heads, fallback_seed=11)
    z = graph.node_features.data
    logits = z @ z.T
    assert np.allclose(graph.edge_logits.data, logits)
    assert np.allclose(graph.edges.data, brute_softmax(logits), atol=1e-12)


def test_edge_logits_symmetric_and_softmax_ratio_identity():
    heads = heads_for(d_h=3, embed_dim=6, seed=2)
    ps = K.build_prompts(["a", "b", "c"], 2, "cat", "z")
    graph = K.build_knowledge_graph(ps, None, heads, fallback_seed=4)
    logits = graph.edge_logits.data
    assert np.allclose(logits, logits.T, atol=1e-12)
    edges = graph.edges.data
    n = edges.shape[0]
    for i in range(n):
        for j in range(0, n, 2):
            for k in range(1, n, 3):
                ratio = edges[i, j] / edges[i, k]
                assert np.isclose(ratio, math.exp(logits[i, j] - logits[i, k]), rtol=1e-9)


def test_node_features_frozen_except_heads():
    # same prompts, same table, fresh graphs -> identical features
    heads = heads_for(d_h=2, embed_dim=4, seed=3)
    ps = K.build_prompts(["a", "b"], 1, "cat", "w")
    g1 = K.build_knowledge_graph(ps, None, heads, fallback_seed=9)
    g2 = K.build_knowledge_graph(ps, None, heads, fallback_seed=9)
    assert np.array_equal(g1.node_features.data, g2.node_features.data)
    # nudging a head changes features (the only trainable path)
    heads.sensor.data += 0.5
    g3 = K.build_knowledge_graph(ps, None, heads, fallback_seed=9)
    assert not np.array_equal(g1.node_features.data, g3.node_features.data)


def test_swapping_sensor_names_permutes_rows():
    heads = heads_for(d_h=3, embed_dim=4, seed=8)
    ps_ab = K.build_prompts(["alpha", "beta"], 2, "cat", "x")
    ps_ba = K.build_prompts(["beta", "alpha"], 2, "cat", "x")
    g_ab = K.build_knowledge_graph(ps_ab, None, heads, fallback_seed=1)
    g_ba = K.build_knowledge_graph(ps_ba, None, heads, fallback_seed=1)
    # node order is patch-major: [a1,b1,a2,b2] vs [b1,a1,b2,a2]
    perm = [1, 0, 3, 2]
    assert np.allclose(g_ba.sensor_part.data, g_ab.sensor_part.data[perm])
    assert np.allclose(g_ba.edges.data, g_ab.edges.data[np.ix_(perm, perm)])


def test_group_consistent_table_clusters_by_group():
    names = ["t0", "p1", "t2", "p3"]
    groups = [0, 1, 0, 1]
    table = K.group_consistent_table(names, groups, 2, ["x", "y"], "cat", seed=3, dim=32)
    p = lambda i, t: K.SENSOR_PROMPT_TEMPLATE.format(name=names[i], t=t)
    same = np.dot(table.entries[p(0, 1)], table.entries[p(2, 1)])
    cross = np.dot(table.entries[p(0, 1)], table.entries[p(1, 1)])
    assert same > cross + 0.2
    ps = K.build_prompts(names, 2, "cat", "x")
    assert all(q in table.entries for q in ps.flat_sensor_prompts())
    assert ps.label_prompt in table.entries
