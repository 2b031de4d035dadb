import numpy as np
import pytest

from artlabel.anatomy import NON_TYPE
from artlabel.gnn import TypeScores
from artlabel.refine import (LEVEL1, PROVENANCES, HRConfig, derive_edge_labels, gnn_only_result,
                             hierarchical_refine, level1_confident, level2_resolve)
from artlabel.synth import SynthConfig, generate, inject_noise_branches
from artlabel.training import DistanceStats, compute_distance_stats
from artlabel.vessel_graph import build_graph

from hr_oracle import check_level2, make_graph, random_case


def onehot_scores(g, soft=0.0):
    n = np.eye(21)[g.node_gt] * (1 - soft) + soft / 21
    e = np.eye(23)[g.edge_gt] * (1 - soft) + soft / 23
    return TypeScores.from_probs(n, e)


def star(schema, centre_type, edge_names, spoke_types=None):
    """Hub node 0 joined to one leaf per edge type; scores are one-hot on the planted types."""
    k = len(edge_names)
    pos = np.vstack([np.zeros(3), np.eye(3)[np.arange(k) % 3] * (5 + np.arange(k))[:, None]])
    g = make_graph(pos, [(0, i + 1) for i in range(k)])
    nt = np.zeros(k + 1, dtype=np.int64)
    nt[0] = schema.node_id(centre_type)
    nt[1:] = [schema.node_id(t) for t in (spoke_types or ["Non_Type"] * k)]
    et = [schema.edge_id(e) for e in edge_names]
    return g, TypeScores.from_probs(np.eye(21)[nt], np.eye(23)[et])


@pytest.fixture(scope="module")
def train_stats(synth_graphs):
    return compute_distance_stats(synth_graphs[:24])


# ---------------------------------------------------------------------------
# level one


def test_level1_confident_examples(schema):
    g, s = star(schema, "PCA_BA", ["P1_L", "P1_R", "BA"])
    assert level1_confident(s, g, schema)[0] == schema.node_id("PCA_BA")
    g, s = star(schema, "ICA_Root_L", ["ICA_L"])
    conf = level1_confident(s, g, schema)
    assert conf[0] == schema.node_id("ICA_Root_L")
    g, s = star(schema, "ICA_Root_L", ["M1_L"])
    assert 0 not in level1_confident(s, g, schema)


def test_level1_rejects_non_type_argmax(schema):
    g, s = star(schema, "Non_Type", ["P1_L", "P1_R", "BA"])
    assert 0 not in level1_confident(s, g, schema)


def test_level1_labels_are_frozen(schema):
    rng = np.random.default_rng(3)
    for _ in range(30):
        g, s = random_case(rng, schema)
        conf = level1_confident(s, g, schema)
        res = hierarchical_refine(s, g, schema)
        for v, t in conf.items():
            assert res.node_labels[v] == t
            assert res.provenance[v] == LEVEL1


# ---------------------------------------------------------------------------
# level two against an independent brute force


@pytest.mark.parametrize("block", range(4))
def test_level2_matches_oracle(schema, block):
    checked = 0
    for seed in range(block * 25, block * 25 + 25):
        rng = np.random.default_rng(seed)
        g, s = random_case(rng, schema)
        conf = level1_confident(s, g, schema)
        stats = None
        if seed % 2:
            stats = DistanceStats({9: 5, 10: 5, 11: 5, 12: 5}, {9: 20.0, 10: 20.0, 11: 15.0, 12: 15.0},
                                  {9: 3.0, 10: 3.0, 11: 2.0, 12: 2.0})
        state = level2_resolve(s, g, conf, schema, stats, HRConfig())
        checked += check_level2(g, s, conf, schema, state, stats)
    assert checked > 0


def test_level2_larger_threshold_matches_oracle(schema):
    for seed in range(200, 220):
        rng = np.random.default_rng(seed)
        g, s = random_case(rng, schema)
        conf = level1_confident(s, g, schema)
        cfg = HRConfig(thres=0.05)
        state = level2_resolve(s, g, conf, schema, None, cfg)
        check_level2(g, s, conf, schema, state, None, thres=0.05)


# ---------------------------------------------------------------------------
# synthetic anatomy


def test_onehot_ground_truth_is_noop(schema, synth_graphs, train_stats):
    for g in synth_graphs[24:]:
        res = hierarchical_refine(onehot_scores(g), g, schema, train_stats)
        np.testing.assert_array_equal(res.node_labels, g.node_gt)
        np.testing.assert_array_equal(res.edge_labels, g.edge_gt)
        assert not res.reinserted_nodes
        assert set(res.provenance) <= set(PROVENANCES)


def test_complete_circle_labels_communicating(schema, train_stats):
    cfg = SynthConfig(seed=4, counts={"test": 5}, p_drop_acomm=0, p_drop_pcomm=0, p_drop_a1=0, p_drop_p1=0,
                      noise_rate=0)
    want = {schema.edge_id(n) for n in ("AComm", "PComm_L", "PComm_R")}
    for case in generate(cfg):
        g = build_graph(case.centerlines)
        res = hierarchical_refine(onehot_scores(g, soft=0.05), g, schema, train_stats)
        assert want <= set(res.edge_labels.tolist())


def test_missing_pcomm_not_invented(schema, train_stats):
    cfg = SynthConfig(seed=5, counts={"test": 5}, p_drop_pcomm=1.0, noise_rate=0)
    pcomm = {schema.edge_id("PComm_L"), schema.edge_id("PComm_R")}
    for case in generate(cfg):
        g = build_graph(case.centerlines)
        res = hierarchical_refine(onehot_scores(g, soft=0.05), g, schema, train_stats)
        assert not pcomm & set(res.edge_labels.tolist())


def test_acomm_removed_reinsertion(schema, train_stats):
    cfg = SynthConfig(seed=2, counts={"test": 6}, p_drop_acomm=1.0, p_drop_pcomm=0, p_drop_a1=0, p_drop_p1=0,
                      noise_rate=0)
    a12 = {schema.node_id("A1_2_L"), schema.node_id("A1_2_R")}
    for case in generate(cfg):
        g = build_graph(case.centerlines)
        res = hierarchical_refine(onehot_scores(g, soft=0.1), g, schema, train_stats)
        assert {r.node_type for r in res.reinserted_nodes} == a12
        for r in res.reinserted_nodes:
            chain = g.chains[r.edge]
            assert 0 < r.point < len(chain) - 1
            np.testing.assert_array_equal(chain[r.point, :3], r.position)
            # the chosen point is the interior point of its chain nearest the learned mean distance
            side = "L" if r.node_type == schema.node_id("A1_2_L") else "R"
            major = int(np.flatnonzero(res.node_labels == schema.node_id(f"ICA_MCA_ACA_{side}"))[0])
            e = schema.edge_id(f"A1_{side}")
            d = np.linalg.norm(chain[1:-1, :3] - g.pos[major], axis=1)
            assert r.point == 1 + int(np.argmin(np.abs(d - train_stats.mean[e])))
            assert res.edge_labels[r.edge] == r.major_side_label == e


def test_noise_branches_stay_non_type(schema, synth_cases, train_stats):
    rng = np.random.default_rng(0)
    for case in synth_cases[24:]:
        noisy = inject_noise_branches(case, 3, rng)
        g = build_graph(noisy.centerlines)
        res = hierarchical_refine(onehot_scores(g, soft=0.05), g, schema, train_stats)
        noise = np.flatnonzero(g.edge_gt == NON_TYPE)
        assert len(noise) >= 3
        assert np.all(res.edge_labels[noise] == NON_TYPE)


def test_deterministic(schema, synth_graphs, train_stats):
    g = synth_graphs[25]
    s = onehot_scores(g, soft=0.3)
    a = hierarchical_refine(s, g, schema, train_stats)
    b = hierarchical_refine(s, g, schema, train_stats)
    assert a.to_dict(schema) == b.to_dict(schema)


# ---------------------------------------------------------------------------
# edge derivation and results


def test_derive_edge_labels_examples(schema):
    n, e = schema.node_id, schema.edge_id
    g = make_graph([[0, 0, 0], [0, 0, 5], [0, 5, 5]], [(0, 1), (1, 2)])
    argmax = np.array([e("M2_L"), e("BA")])
    out = derive_edge_labels([n("ICA_Root_L"), n("ICA_OA_L"), 0], g, schema, argmax)
    assert out.tolist() == [e("ICA_L"), e("BA")]
    out = derive_edge_labels([n("ICA_Root_L"), n("PCA_BA"), 0], g, schema, argmax)
    assert out[0] == e("M2_L")
    out = derive_edge_labels([n("ICA_Root_L"), n("PCA_BA"), 0], g, schema, argmax, unmatched="non_type")
    assert out[0] == NON_TYPE
    out = derive_edge_labels([0, 0, 0], g, schema, argmax, overrides={1: e("AComm")})
    assert out.tolist() == [e("M2_L"), e("AComm")]


def test_gnn_only_result(schema, synth_graphs):
    g = synth_graphs[0]
    s = onehot_scores(g, soft=0.5)
    res = gnn_only_result(s, g)
    np.testing.assert_array_equal(res.node_labels, s.node_argmax)
    np.testing.assert_array_equal(res.edge_labels, s.edge_argmax)


def test_to_dict_format(schema, synth_graphs, train_stats):
    g = synth_graphs[24]
    d = hierarchical_refine(onehot_scores(g), g, schema, train_stats).to_dict(schema, "c1")
    assert d["format"] == "artlabel-labels" and d["case_id"] == "c1"
    assert len(d["nodes"]) == g.n_nodes and len(d["edges"]) == g.n_edges
    assert all(rec["label"] in schema.node_names for rec in d["nodes"])
    assert all(rec["label"] in schema.edge_names for rec in d["edges"])


def test_hr_config_validation():
    for kw in ({"thres": 0.0}, {"thres": 1.0}, {"distance_sigma_mult": 0}, {"unmatched_segment": "x"}):
        with pytest.raises(ValueError):
            HRConfig(**kw)
