import filecmp
import logging

import numpy as np
import pytest

from artlabel.synth import (DROPPABLE, SynthConfig, check_case, drop_distribution, generate,
                            inject_noise_branches, valid_drop_sets, write_dataset)
from artlabel.vessel_graph import build_graph


def frozen_config(**kw):
    """Every random draw collapsed to a single value."""
    base = dict(p_drop_acomm=0, p_drop_pcomm=0, p_drop_a1=0, p_drop_p1=0, noise_rate=0, jitter_mm=0,
                scale_jitter=0, bend_mm=0, distal_depth=(0, 0), m2_branches=(2, 2),
                radius_ica_ba=(2, 2), radius_va=(1.5, 1.5), radius_proximal=(1.5, 1.5), radius_comm=(1, 1),
                radius_oa=(0.7, 0.7), radius_distal=(1, 1), radius_noise=(0.3, 0.3),
                noise_length_mm=(5, 5), m2_length_mm=(18, 18), a2_length_mm=(25, 25),
                p2_length_mm=(24, 24), resolutions=((0.4, 0.4, 0.4),))
    base.update(kw)
    return SynthConfig(**base)


def test_zero_randomness_cases_identical(schema):
    cases = generate(frozen_config(counts={"train": 4}))
    first = cases[0].centerlines
    for c in cases[1:]:
        assert len(c.centerlines.polylines) == len(first.polylines)
        for a, b in zip(c.centerlines.polylines, first.polylines):
            np.testing.assert_array_equal(a, b)
        assert c.centerlines.edge_labels == first.edge_labels
        assert c.variation["dropped"] == []
    assert check_case(first, schema) == []


def test_drop_acomm_always(schema):
    cases = generate(SynthConfig(seed=3, counts={"train": 30}, p_drop_acomm=1.0))
    acomm = schema.edge_id("AComm")
    for c in cases:
        assert acomm not in c.centerlines.edge_labels
        assert "AComm" in c.variation["dropped"]


@pytest.mark.slow
def test_drop_rates_match_config():
    cfg = SynthConfig(seed=0, counts={"train": 1000}, noise_rate=0)
    cases = generate(cfg)
    probs = cfg.drop_probabilities()
    for name in DROPPABLE:
        rate = np.mean([name in c.variation["dropped"] for c in cases])
        assert abs(rate - probs[name]) <= 0.03, (name, rate)


def test_drop_distribution_is_calibrated(schema):
    cfg = SynthConfig()
    sets, probs = drop_distribution(cfg, schema)
    np.testing.assert_allclose(probs.sum(), 1.0)
    for name in DROPPABLE:
        assert sum(p for d, p in zip(sets, probs) if name in d) == pytest.approx(cfg.drop_probabilities()[name],
                                                                                 abs=1e-6)


def test_only_orphaning_drops_are_invalid(schema):
    valid = set(valid_drop_sets(SynthConfig(), schema))
    assert frozenset() in valid
    assert frozenset({"PComm_L", "PComm_R"}) in valid
    # each of these leaves a fragment with no inflow
    for bad in ({"A1_L", "AComm"}, {"A1_L", "A1_R"}, {"P1_R", "PComm_R"}, {"P1_L", "P1_R"}):
        assert frozenset(bad) not in valid


def test_unattainable_rates_warn(schema, caplog):
    with caplog.at_level(logging.WARNING, logger="artlabel.synth"):
        drop_distribution(SynthConfig(p_drop_pcomm=1.0), schema)
    assert "not attainable" in caplog.text


def test_every_component_has_inflow(schema, synth_cases):
    roots = {schema.node_id(n) for n in ("ICA_Root_L", "ICA_Root_R", "VA_Root_L", "VA_Root_R")}
    for c in synth_cases:
        assert check_case(c.centerlines, schema) == []
        g = build_graph(c.centerlines)
        adj = g.incident()
        seen = set()
        for r in np.flatnonzero(np.isin(g.node_gt, list(roots))):
            stack = [int(r)]
            while stack:
                v = stack.pop()
                if v in seen:
                    continue
                seen.add(v)
                stack.extend(u for _, u in adj[v])
        assert len(seen) == g.n_nodes


def test_noise_zero_is_identity(synth_cases):
    c = synth_cases[0]
    assert inject_noise_branches(c, 0, np.random.default_rng(0)) is c


def test_noise_adds_leaves(schema, synth_cases):
    for c in synth_cases[:5]:
        base = build_graph(c.centerlines)
        noisy = build_graph(inject_noise_branches(c, 5, np.random.default_rng(1)).centerlines)
        assert (noisy.degree == 1).sum() == (base.degree == 1).sum() + 5
        assert (noisy.edge_gt == 0).sum() == (base.edge_gt == 0).sum() + 5
        assert check_case(inject_noise_branches(c, 5, np.random.default_rng(1)).centerlines, schema) == []


def test_noise_without_m1_warns(schema, synth_cases, caplog):
    import dataclasses
    c = synth_cases[0]
    m1 = {schema.edge_id("M1_L"), schema.edge_id("M1_R")}
    keep = [i for i, lab in enumerate(c.centerlines.edge_labels) if lab not in m1]
    cl = dataclasses.replace(c.centerlines, polylines=[c.centerlines.polylines[i] for i in keep],
                             edge_labels=[c.centerlines.edge_labels[i] for i in keep],
                             node_labels=[c.centerlines.node_labels[i] for i in keep])
    stripped = dataclasses.replace(c, centerlines=cl)
    with caplog.at_level(logging.WARNING, logger="artlabel.synth"):
        out = inject_noise_branches(stripped, 3, np.random.default_rng(0))
    assert out is stripped and "no M1" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError, match="p_drop_acomm"):
        SynthConfig(p_drop_acomm=1.5)
    with pytest.raises(ValueError):
        SynthConfig(jitter_mm=-1)
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"bogus": 1})


def test_write_dataset_byte_identical(tmp_path):
    cfg = SynthConfig(seed=9, counts={"train": 3, "test": 2})
    write_dataset(generate(cfg), tmp_path / "a", cfg)
    write_dataset(generate(cfg), tmp_path / "b", cfg)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    sub = filecmp.dircmp(tmp_path / "a" / "cases", tmp_path / "b" / "cases")
    assert len(sub.same_files) == 5 and not sub.diff_files
