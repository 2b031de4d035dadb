import numpy as np
import pytest

from artlabel.anatomy import default_schema
from artlabel.gnn import ModelConfig
from artlabel.synth import SynthConfig, generate
from artlabel.training import TrainConfig, train
from artlabel.vessel_graph import build_graph


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def synth_cases(schema):
    return generate(SynthConfig(seed=11, counts={"train": 24, "test": 8}), schema)


@pytest.fixture(scope="session")
def synth_graphs(synth_cases):
    return [build_graph(c.centerlines) for c in synth_cases]


@pytest.fixture(scope="session")
def quick_model(synth_graphs):
    """A briefly trained small network; good enough for plumbing, not for accuracy claims."""
    cfg = TrainConfig(epochs=4, patience=50, seed=2, model=ModelConfig(latent_dim=16, hidden_dim=16, rounds=3, seed=2))
    return train(synth_graphs[:24], cfg)


def random_graph_arrays(rng, n_nodes, n_extra=0):
    """Connected random edge list: a random tree plus ``n_extra`` chords (no duplicates)."""
    edges = set()
    for v in range(1, n_nodes):
        u = int(rng.integers(v))
        edges.add((u, v))
    tries = 0
    while n_extra and tries < 100:
        a, b = sorted(int(x) for x in rng.choice(n_nodes, 2, replace=False))
        if (a, b) not in edges:
            edges.add((a, b))
            n_extra -= 1
        tries += 1
    return np.array(sorted(edges), dtype=np.int64)
