import math

import numpy as np
import pytest

from artlabel.errors import DivergenceError, TrainingDataError
from artlabel.gnn import ModelConfig, TypeScores, fit_standardization, init_params
from artlabel.training import (Adam, ClassWeights, DistanceStats, TrainConfig, augment_translate,
                               compute_class_weights, compute_distance_stats, evaluate, inverse_frequency,
                               loss, train, train_step, translation_offset, write_log)


def unit_weights():
    return ClassWeights(np.ones(21), np.ones(23))


def test_inverse_frequency_examples():
    np.testing.assert_allclose(inverse_frequency([50, 50]), [1.0, 1.0])
    w = inverse_frequency([90, 10])
    np.testing.assert_allclose(w, [100 / 180, 5.0])
    assert w[0] == pytest.approx(0.556, abs=1e-3)
    assert 90 * w[0] == pytest.approx(10 * w[1])
    np.testing.assert_allclose(inverse_frequency([30, 0, 10]), [40 / 60, 0.0, 2.0])


def test_class_weights_from_graphs(synth_graphs):
    w = compute_class_weights(synth_graphs)
    counts = np.bincount(np.concatenate([g.node_gt for g in synth_graphs]), minlength=21)
    assert np.all(w.node_weights >= 0)
    assert np.all(w.node_weights[counts > 0] > 0)
    assert np.all(w.node_weights[counts == 0] == 0)
    # weighted counts are equal across observed classes
    prod = (w.node_weights * counts)[counts > 0]
    np.testing.assert_allclose(prod, prod[0])


def test_class_weights_need_labels(synth_graphs):
    g = synth_graphs[0]
    unlabeled = type(g)(**{**g.__dict__, "node_gt": None, "edge_gt": None})
    with pytest.raises(TrainingDataError):
        compute_class_weights([unlabeled])


def test_loss_perfect_predictions():
    labels = np.array([0, 3, 7, 20])
    elabels = np.array([1, 22])
    s = TypeScores.from_logits(np.eye(21)[labels] * 60.0, np.eye(23)[elabels] * 60.0)
    res = loss(s, labels, elabels, unit_weights())
    assert 0 <= res.value < 1e-6


def test_loss_uniform_nodes_only():
    s = TypeScores.from_logits(np.zeros((5, 21)), np.zeros((0, 23)))
    res = loss(s, [0, 1, 2, 3, 4], None, unit_weights())
    assert res.value == pytest.approx(math.log(21))
    assert math.log(21) == pytest.approx(3.0445, abs=1e-4)


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(0)
    nl, el = rng.normal(size=(7, 21)), rng.normal(size=(5, 23))
    ny, ey = rng.integers(0, 21, 7), rng.integers(0, 23, 5)
    w = ClassWeights(rng.uniform(0.1, 3, 21), rng.uniform(0.1, 3, 23))

    def value(a, b):
        return loss(TypeScores.from_logits(a, b), ny, ey, w, edge_coef=0.7).value

    res = loss(TypeScores.from_logits(nl, el), ny, ey, w, edge_coef=0.7)
    # five-point stencil: truncation O(h^4) keeps the numeric side well below the tolerance
    h = 1e-3
    for arr, grad in ((nl, res.d_node_logits), (el, res.d_edge_logits)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            f = []
            for step in (2 * h, h, -h, -2 * h):
                arr[idx] = old + step
                f.append(value(nl, el))
            arr[idx] = old
            num[idx] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
        rel = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-8)
        assert rel.max() < 1e-6


def test_loss_clamps_zero_probability():
    s = TypeScores.from_logits(np.array([[0.0, -1e4] + [0.0] * 19]), np.zeros((0, 23)))
    res = loss(s, [1], None, unit_weights())
    assert res.clamped == 1
    assert res.value == pytest.approx(-math.log(1e-12))


def test_loss_batch_is_mean_of_graphs():
    rng = np.random.default_rng(1)
    nl, ny = rng.normal(size=(6, 21)), rng.integers(0, 21, 6)
    groups = np.array([0, 0, 0, 1, 1, 1])
    s = TypeScores.from_logits(nl, np.zeros((0, 23)))
    batch = loss(s, ny, None, unit_weights(), node_graph=groups, n_graphs=2).value
    a = loss(TypeScores.from_logits(nl[:3], np.zeros((0, 23))), ny[:3], None, unit_weights()).value
    b = loss(TypeScores.from_logits(nl[3:], np.zeros((0, 23))), ny[3:], None, unit_weights()).value
    assert batch == pytest.approx((a + b) / 2)


def test_augment_zero_offset(synth_graphs):
    g = synth_graphs[0]
    out = augment_translate(g, np.random.default_rng(0), fraction=0.0)
    np.testing.assert_array_equal(out.pos, g.pos)


def test_augment_rigid(synth_graphs):
    g = synth_graphs[0]
    out = augment_translate(g, np.random.default_rng(0))
    d0 = np.linalg.norm(g.pos[:, None] - g.pos[None], axis=-1)
    d1 = np.linalg.norm(out.pos[:, None] - out.pos[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    np.testing.assert_array_equal(out.edge_features(), g.edge_features())
    np.testing.assert_array_equal(out.dir_emb, g.dir_emb)
    assert not np.array_equal(out.pos, g.pos)


def test_augment_bounds(synth_graphs):
    g = synth_graphs[0]
    extent = g.pos.max(0) - g.pos.min(0)
    rng = np.random.default_rng(5)
    offs = np.array([translation_offset(g, rng) for _ in range(10_000)])
    assert np.all(np.abs(offs) <= 0.10 * extent)
    # the draws should fill most of the allowed box, not just a corner of it
    assert np.all(offs.max(0) > 0.09 * extent) and np.all(offs.min(0) < -0.09 * extent)


def test_adam_zero_gradient_keeps_params():
    w = {"a": np.array([1.0, -2.0])}
    opt = Adam(w)
    for _ in range(5):
        opt.step(w, {"a": np.zeros(2)})
    np.testing.assert_array_equal(w["a"], [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    w = {"a": np.array([1.0, 1.0])}
    Adam(w, lr=0.01).step(w, {"a": np.array([3.0, -0.5])})
    np.testing.assert_allclose(w["a"], [0.99, 1.01], atol=1e-8)


def test_lr_zero_bit_identical(synth_graphs):
    cfg = TrainConfig(learning_rate=0.0, model=ModelConfig(latent_dim=8, hidden_dim=8, rounds=2))
    params = fit_standardization(init_params(cfg.model), synth_graphs)
    before = {k: v.copy() for k, v in params.weights.items()}
    opt = Adam(params.weights, 0.0)
    w = compute_class_weights(synth_graphs)
    rng = np.random.default_rng(0)
    for step in range(6):
        train_step(params, synth_graphs[step * 4:(step + 1) * 4], w, cfg, rng, opt)
    for k in before:
        assert before[k].tobytes() == params.weights[k].tobytes()


def test_single_graph_overfit(synth_graphs):
    g = synth_graphs[0]
    cfg = TrainConfig(augmentation_fraction=0.0, model=ModelConfig(seed=1))
    params = fit_standardization(init_params(cfg.model), [g])
    w = compute_class_weights([g])
    opt = Adam(params.weights, cfg.learning_rate)
    rng = np.random.default_rng(0)
    values = [train_step(params, [g], w, cfg, rng, opt) for _ in range(500)]
    final, _, _ = evaluate(params, [g], w)
    assert min(values) < 0.01 and final < 0.01


def test_distance_stats(synth_graphs):
    stats = compute_distance_stats(synth_graphs)
    assert stats.count and all(m > 0 for m in stats.mean.values())
    assert all(s >= 0 for s in stats.std.values())
    assert 0 not in stats.count
    again = DistanceStats.from_dict(stats.to_dict())
    assert again.to_dict() == stats.to_dict()
    arc = compute_distance_stats(synth_graphs, measure="arc_length")
    for t in stats.mean:
        assert arc.mean[t] >= stats.mean[t]
    with pytest.raises(ValueError):
        compute_distance_stats(synth_graphs, measure="manhattan")


def test_distance_stats_single_sample_std_zero(synth_graphs):
    stats = compute_distance_stats(synth_graphs[:1])
    single = [t for t, c in stats.count.items() if c == 1]
    assert single and all(stats.std[t] == 0.0 for t in single)


def test_train_seeded_determinism(synth_graphs):
    cfg = TrainConfig(epochs=2, seed=3, model=ModelConfig(latent_dim=8, hidden_dim=8, rounds=2, seed=3))
    a = train(synth_graphs[:12], cfg)
    b = train(synth_graphs[:12], cfg)
    for k in a.params.weights:
        assert a.params.weights[k].tobytes() == b.params.weights[k].tobytes()
    assert a.log == b.log


def test_train_log_and_early_stop(tmp_path, quick_model):
    import csv
    assert 1 <= quick_model.best_epoch <= len(quick_model.log)
    p = tmp_path / "log.csv"
    write_log(quick_model.log, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "node_acc", "edge_acc"]
    assert len(rows) == len(quick_model.log) + 1


def test_divergence_keeps_last_good(synth_graphs):
    cfg = TrainConfig(epochs=1, learning_rate=1e300, model=ModelConfig(latent_dim=8, hidden_dim=8, rounds=2))
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError) as exc:
            train(synth_graphs[:8], cfg)
    params = exc.value.params
    assert all(np.isfinite(v).all() for v in params.weights.values())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(augmentation_fraction=1.0)
