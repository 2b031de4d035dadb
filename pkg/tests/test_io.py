import json

import numpy as np
import pytest

from artlabel.errors import InputError
from artlabel.io import (graph_from_dict, graph_to_dict, read_centerlines, write_centerlines)
from artlabel.training import compute_distance_stats
from artlabel.vessel_graph import build_graph


def test_centerline_roundtrip(tmp_path, schema, synth_cases):
    cl = synth_cases[0].centerlines
    p = tmp_path / "c.jsonl"
    write_centerlines(cl, p, schema)
    back = read_centerlines(p, schema)
    assert back.case_id == cl.case_id
    np.testing.assert_array_equal(back.resolution, cl.resolution)
    for a, b in zip(cl.polylines, back.polylines):
        np.testing.assert_array_equal(a, b)
    assert back.edge_labels == [int(v) for v in cl.edge_labels]
    assert back.node_labels == cl.node_labels
    first = p.read_text().splitlines()[0]
    assert json.loads(first)["record"] == "header"


def test_graph_roundtrip_reproduces_stats(schema, synth_graphs):
    graphs = synth_graphs[:6]
    back = [graph_from_dict(json.loads(json.dumps(graph_to_dict(g, schema))), schema) for g in graphs]
    for g, h in zip(graphs, back):
        np.testing.assert_array_equal(g.node_features(), h.node_features())
        np.testing.assert_array_equal(g.edge_features(), h.edge_features())
        np.testing.assert_array_equal(g.edge_gt, h.edge_gt)
    a, b = compute_distance_stats(graphs), compute_distance_stats(back)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("text, where", [
    ("", "empty"),
    ('{"record": "polyline"}\n', ":1:"),
    ('{"record": "header", "format": "artlabel-centerlines"}\n{oops\n', ":2:"),
    ('{"record": "header", "format": "artlabel-centerlines"}\n{"record": "polyline", "points": [[0, 0]]}\n', ":2:"),
])
def test_bad_centerline_files(tmp_path, schema, text, where):
    p = tmp_path / "bad.jsonl"
    p.write_text(text)
    with pytest.raises(InputError, match=where):
        read_centerlines(p, schema)


def test_unlabeled_file(tmp_path, schema):
    p = tmp_path / "u.jsonl"
    p.write_text('{"record": "header", "format": "artlabel-centerlines", "resolution": [0.5, 0.5, 0.5]}\n'
                 '{"record": "polyline", "points": [[0, 0, 0, 1], [2, 0, 0, 1], [4, 0, 0, 1]]}\n')
    cl = read_centerlines(p, schema)
    assert not cl.has_labels
    g = build_graph(cl)
    assert g.n_edges == 1 and g.edge_dist[0] == pytest.approx(2.0)
    assert not g.labeled
