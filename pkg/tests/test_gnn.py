import numpy as np
import pytest

from artlabel.errors import InputError, NumericError
from artlabel.gnn import (GraphInputs, ModelConfig, TypeScores, backward, forward, graph_inputs,
                          init_params, load_checkpoint, predict, save_checkpoint, softmax_rows)

from gradcheck import max_relative_error, random_inputs, small_params


def permuted(inp, perm):
    """Relabel node i as perm[i]."""
    inv = np.argsort(perm)
    return GraphInputs(inp.node_x[inv], inp.edge_x, perm[inp.edges], inp.node_graph, inp.edge_graph)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 21))), 1 / 21)
    assert 1 / 21 == pytest.approx(0.047619, abs=1e-6)
    row = np.zeros((1, 21))
    row[0, 0] = 10
    p = softmax_rows(row)
    # exp(10) / (exp(10) + 20) over 21 classes
    assert p.argmax() == 0
    assert p[0, 0] == pytest.approx(np.exp(10) / (np.exp(10) + 20), rel=1e-12)
    assert p[0, 0] > 0.999
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    p = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0 and p[0, 1] < 1e-300


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = softmax_rows(rng.normal(scale=20, size=(500, 23)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_forward_shapes_and_distributions(synth_graphs):
    params = init_params(ModelConfig(latent_dim=16, hidden_dim=16, rounds=3))
    s = predict(params, synth_graphs[0])
    g = synth_graphs[0]
    assert s.node_probs.shape == (g.n_nodes, 21) and s.edge_probs.shape == (g.n_edges, 23)
    np.testing.assert_allclose(s.node_probs.sum(1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(s.node_argmax, s.node_logits.argmax(1))


@pytest.mark.parametrize("seed", range(10))
def test_equivariance(seed):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, int(rng.integers(3, 25)), 3)
    params = small_params(seed, width=8, rounds=4)
    perm = rng.permutation(inp.n_nodes)
    a = forward(params, inp)
    b = forward(params, permuted(inp, perm))
    np.testing.assert_allclose(b.node_logits[perm], a.node_logits, rtol=0, atol=1e-9)
    np.testing.assert_allclose(b.edge_logits, a.edge_logits, rtol=0, atol=1e-9)


def test_deterministic_forward():
    rng = np.random.default_rng(3)
    inp = random_inputs(rng, 12, 2)
    params = small_params(3)
    a, b = forward(params, inp), forward(params, inp)
    assert a.node_logits.tobytes() == b.node_logits.tobytes()
    assert a.edge_logits.tobytes() == b.edge_logits.tobytes()


def test_disconnected_component_does_not_leak():
    rng = np.random.default_rng(4)
    a = random_inputs(rng, 7, 1)
    b = random_inputs(rng, 5, 1)
    union = GraphInputs(np.concatenate([a.node_x, b.node_x]), np.concatenate([a.edge_x, b.edge_x]),
                        np.concatenate([a.edges, b.edges + a.n_nodes]),
                        np.zeros(12, dtype=np.int64), np.zeros(a.n_edges + b.n_edges, dtype=np.int64))
    params = small_params(4)
    sa, su = forward(params, a), forward(params, union)
    np.testing.assert_allclose(su.node_logits[:7], sa.node_logits, rtol=0, atol=1e-12)
    np.testing.assert_allclose(su.edge_logits[:a.n_edges], sa.edge_logits, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed, aggregation", [(0, "sum"), (1, "sum"), (2, "mean")])
def test_gradient_finite_difference(seed, aggregation):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, 6, 1)
    params = small_params(seed, width=5, rounds=3, aggregation=aggregation)
    s, cache = forward(params, inp, return_cache=True)
    a = rng.normal(size=s.node_logits.shape)
    b = rng.normal(size=s.edge_logits.shape)
    grads = backward(params, cache, a, b)
    assert max_relative_error(params, inp, grads, a, b) < 1e-4


def test_zero_upstream_gradient():
    rng = np.random.default_rng(5)
    inp = random_inputs(rng, 6)
    params = small_params(5)
    s, cache = forward(params, inp, return_cache=True)
    grads = backward(params, cache, np.zeros_like(s.node_logits), np.zeros_like(s.edge_logits))
    assert all(not g.any() for g in grads.values())


def test_node_only_loss_leaves_edge_decoder():
    rng = np.random.default_rng(6)
    inp = random_inputs(rng, 6)
    params = small_params(6)
    s, cache = forward(params, inp, return_cache=True)
    grads = backward(params, cache, rng.normal(size=s.node_logits.shape), np.zeros_like(s.edge_logits))
    for name, g in grads.items():
        if name.startswith("edge_decoder"):
            assert not g.any(), name
    assert grads["core_edge/W0"].any()


def test_cache_mismatch():
    rng = np.random.default_rng(7)
    inp = random_inputs(rng, 5)
    s, cache = forward(small_params(7, width=5), inp, return_cache=True)
    with pytest.raises(RuntimeError):
        backward(small_params(7, width=6), cache, s.node_logits, s.edge_logits)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error_names_block():
    rng = np.random.default_rng(8)
    inp = random_inputs(rng, 5)
    params = small_params(8, rounds=3)
    params.weights["core_node/W0"][0, 0] = np.inf
    with pytest.raises(NumericError) as exc:
        forward(params, inp)
    assert exc.value.block == "core_node" and exc.value.round_index == 1


def test_input_dimension_check():
    rng = np.random.default_rng(9)
    inp = random_inputs(rng, 5)
    bad = GraphInputs(inp.node_x[:, :10], inp.edge_x, inp.edges, inp.node_graph, inp.edge_graph)
    with pytest.raises(InputError):
        forward(small_params(9), bad)


def test_no_direction_zeroes_block(synth_graphs):
    inp = graph_inputs(synth_graphs[0], use_direction=False)
    assert not inp.node_x[:, 4:].any()
    assert graph_inputs(synth_graphs[0]).node_x[:, 4:].any()


def test_batched_equals_single(synth_graphs):
    params = init_params(ModelConfig(latent_dim=8, hidden_dim=8, rounds=3))
    graphs = synth_graphs[:3]
    inp = graph_inputs(graphs)
    parts = forward(params, inp).split(inp)
    for g, part in zip(graphs, parts):
        np.testing.assert_allclose(part.node_logits, predict(params, g).node_logits, rtol=0, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, synth_graphs):
    params = small_params(10)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(p1, params, {"note": 1})
    loaded, raw = load_checkpoint(p1)
    assert raw["note"] == 1
    for k in params.weights:
        assert params.weights[k].tobytes() == loaded.weights[k].tobytes()
    save_checkpoint(p2, loaded, {"note": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_from_probs_argmax():
    s = TypeScores.from_probs(np.eye(21)[[3, 0]], np.eye(23)[[5]])
    assert s.node_argmax.tolist() == [3, 0] and s.edge_argmax.tolist() == [5]
