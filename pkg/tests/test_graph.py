import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udc.graph import EDGE_FEATURES, NODE_FEATURES, build_sparse_graph, kp_affinity
from udc.problems import Instance, Kind, generate_instance


def test_collinear_knn_links_neighbors():
    xy = np.column_stack([np.linspace(0, 1, 5), np.zeros(5)])
    g = build_sparse_graph(Instance(Kind.TSP, 5, coords=xy), 2)
    for i in (1, 2, 3):
        assert sorted(g.dst[g.src == i].tolist()) == [i - 1, i + 1]


def test_kp_affinity_hand_values():
    v, w = np.array([1.0, 1.0, 2.0]), np.array([1.0, 2.0, 1.0])
    # d'_ij = (v_i + v_j) / (w_i + w_j)
    d = np.array([[np.nan, 2 / 3, 3 / 2], [2 / 3, np.nan, 3 / 3], [3 / 2, 1.0, np.nan]])
    assert d[0, 2] == 1.5
    aff = kp_affinity(v, w)
    for i in range(3):
        row_max = np.nanmax(d[i])
        for j in range(3):
            if i != j:
                assert aff[i, j] == pytest.approx(1 - d[i, j] / row_max)
    inst = Instance(Kind.KP, 3, values=v / 2, weights=w / 2, capacity=1.0)
    g = build_sparse_graph(inst, 1)
    # node 0's highest affinity neighbour (lowest weight 1 - d'/max) is node 2
    assert g.dst[g.src == 0].tolist() == [2]
    assert g.edge_features[g.src == 0][0, 0] == pytest.approx(0.0)


def test_mis_edges_pass_through():
    inst = generate_instance("mis", 30, 3)
    g = build_sparse_graph(inst)
    got = sorted(zip(g.src.tolist(), g.dst.tolist()))
    e = inst.edges
    want = sorted([(int(a), int(b)) for a, b in e] + [(int(b), int(a)) for a, b in e])
    assert got == want


def test_k_clamped_with_warning():
    g = build_sparse_graph(generate_instance("tsp", 5, 0), 9)
    assert g.k == 4 and g.warnings and "clamped" in g.warnings[0]


def test_feature_widths_match_registry():
    for k in Kind:
        g = build_sparse_graph(generate_instance(k, 12, 1))
        assert g.node_features.shape[1] == len(NODE_FEATURES[k])
        assert g.edge_features.shape[1] == len(EDGE_FEATURES[k])


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from([Kind.TSP, Kind.CVRP, Kind.OP, Kind.PCTSP, Kind.KP]),
       n=st.integers(3, 60), k=st.integers(1, 25), seed=st.integers(0, 999))
def test_degree_bound_and_endpoints(kind, n, k, seed):
    inst = generate_instance(kind, n, seed)
    g = build_sparse_graph(inst, k)
    assert g.n_edges <= g.k * g.n_nodes
    assert np.bincount(g.src, minlength=g.n_nodes).max() <= g.k
    assert g.src.max() < g.n_nodes and g.dst.max() < g.n_nodes
    assert not np.any(g.src == g.dst)
    g2 = build_sparse_graph(inst, k)
    assert np.array_equal(g.src, g2.src) and np.array_equal(g.dst, g2.dst)


def test_knn_ties_prefer_lower_index():
    xy = np.array([[0.5, 0.5], [0.4, 0.5], [0.6, 0.5], [0.5, 0.4]])
    g = build_sparse_graph(Instance(Kind.TSP, 4, coords=xy), 2)
    assert g.dst[g.src == 0].tolist() == [1, 2]
