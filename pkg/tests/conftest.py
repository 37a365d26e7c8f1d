import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deeplinker import ModelConfig, build_neighbor_table, load_graph, split_edges

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# Five-node toy graph in the spirit of the paper-figure example:
# two linked hubs (0, 1) sharing neighbors, plus a peripheral node.
TOY_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 4)]

# Ring with chords, big enough that every positive subset leaves the
# negative sampler room to work.
MEDIUM_EDGES = [(i, (i + 1) % 12) for i in range(12)] + [
    (0, 6), (1, 7), (2, 8), (3, 9), (4, 10), (5, 11)]


def write_edge_file(path, edges):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a} {b}\n")
    return path


@pytest.fixture
def toy_graph(tmp_path):
    return load_graph(write_edge_file(tmp_path / "toy.txt", TOY_EDGES))


@pytest.fixture
def toy_table(toy_graph):
    """Frozen samples over every toy edge (no split), for model tests."""
    return build_neighbor_table(toy_graph, toy_graph.edges(), sample_size=3, seed=7)


@pytest.fixture
def medium_graph(tmp_path):
    return load_graph(write_edge_file(tmp_path / "medium.txt", MEDIUM_EDGES))


@pytest.fixture
def medium_setup(medium_graph):
    """Graph + split + frozen sample table sized for fast unit tests."""
    split = split_edges(medium_graph, test_frac=0.25, val_frac=0.2, seed=7)
    table = build_neighbor_table(medium_graph, split.train_pos, sample_size=3, seed=7)
    return medium_graph, split, table


@pytest.fixture
def toy_model_config(toy_graph):
    return ModelConfig(in_dim=toy_graph.features.dim, hidden=4, heads1=2, heads2=1,
                       embed_dim=6, sample_size=3, attention="learned")


@pytest.fixture
def cora_paths():
    paths = {
        "edges": DATA_DIR / "cora" / "edges.txt",
        "features": DATA_DIR / "cora" / "features.txt",
        "labels": DATA_DIR / "cora" / "labels.txt",
    }
    for p in paths.values():
        if not p.is_file():
            pytest.fail(f"vendored Cora file missing: {p}")
    return paths


def pytest_addoption(parser):
    parser.addoption("--skip-cora", action="store_true", default=False,
                     help="skip the long end-to-end acceptance runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-cora"):
        marker = pytest.mark.skip(reason="--skip-cora given")
        for item in items:
            if "cora_run" in item.keywords:
                item.add_marker(marker)


def pytest_configure(config):
    config.addinivalue_line("markers", "cora_run: full end-to-end training run")


@pytest.fixture(autouse=True)
def _single_thread_blas():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
