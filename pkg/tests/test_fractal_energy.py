import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kochlayer.fractal_energy import (
    PAIR_CONVENTIONS,
    BesovLevelError,
    ConventionMismatch,
    TraceValues,
    besov_seminorm_estimate,
    cell_graph,
    decimate_extend,
    decimation_step,
    discrete_energy,
    energy_sequence,
    fill_apexes,
    mu_cell_measure,
    segment_extension,
)
from kochlayer.geometry import CellAddress, iter_addresses

from .oracles import dense_extension, point_key


def smooth(x, y):
    return np.sin(3 * x) + y * y


def test_level_zero_energy_of_x():
    for conv, expect in [("all-pairs-unordered", 0.75), ("all-pairs-ordered", 1.5), ("edges-only", 0.75)]:
        tr = TraceValues.from_function(cell_graph(0, conv, "set"), lambda x, y: x)
        assert discrete_energy(tr, 2.0) == pytest.approx(expect, rel=1e-15)
    # the three curves share the base triangle, so every cell counts it again
    tr = TraceValues.from_function(cell_graph(0), lambda x, y: x)
    assert discrete_energy(tr, 2.0) == pytest.approx(2.25, rel=1e-15)


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_graph_counts(n):
    g = cell_graph(n)
    assert len(g.triangles) == 3 * 4**n
    assert len(set(g.curve_vertex_indices().tolist())) == 3 * 4**n
    assert g.n_nodes == 3 * 4**n + len(g.apex_indices())


def test_constants_have_zero_energy():
    for conv in PAIR_CONVENTIONS:
        tr = TraceValues(cell_graph(2, conv), np.full(cell_graph(2).n_nodes, 1.7))
        assert discrete_energy(tr, 3.0) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 4), st.sampled_from([2.0, 2.5, 3.0]))
def test_shift_invariance_and_homogeneity(c, lam, p):
    g = cell_graph(2)
    v = TraceValues.from_function(g, smooth).values
    base = discrete_energy(TraceValues(g, v), p)
    assert discrete_energy(TraceValues(g, v + c), p) == pytest.approx(base, rel=1e-11)
    assert discrete_energy(TraceValues(g, lam * v), p) == pytest.approx(lam**p * base, rel=1e-11)


def test_convention_mismatch():
    tr = TraceValues.from_function(cell_graph(1), smooth)
    with pytest.raises(ConventionMismatch):
        discrete_energy(tr, 2.0, convention="edges-only")


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_affine_energy_ratio(p):
    # for affine u every level-(n+1) cell is a 1/3 copy; four of them per cell
    rows = energy_sequence(lambda x, y: x, p, 4)
    for r in rows[1:]:
        assert r["ratio"] == pytest.approx((4 / 3) ** p, rel=1e-12)


def test_segment_extension_symmetry():
    for p in (2.0, 3.0, 4.0):
        ext = segment_extension(0.0, 1.0, p)
        assert ext["tip"] == pytest.approx(0.5, abs=1e-12)
        assert ext["a1"] + ext["a2"] == pytest.approx(1.0, abs=1e-12)
        assert ext["apex1"] + ext["apex4"] == pytest.approx(1.0, abs=1e-12)
    ext = segment_extension(0.0, 1.0, 2.0)
    assert [ext[k] for k in ("apex1", "a1", "tip", "a2", "apex4")] == pytest.approx([0.2, 0.4, 0.5, 0.6, 0.8], abs=1e-13)
    assert segment_extension(2.0, 2.0, 3.0) == {k: 2.0 for k in ("a1", "tip", "a2", "apex1", "apex4")}


@pytest.mark.parametrize("n", [0, 1, 2])
def test_p2_extension_matches_dense_laplacian(n):
    coarse = TraceValues.from_function(cell_graph(n), smooth)
    fine = decimation_step(coarse, 2.0)
    cv = coarse.graph.curve_vertex_indices()
    key, ref = dense_extension(n + 1, coarse.graph.coords[cv], coarse.values[cv])
    assert len(key) == fine.graph.n_nodes
    for pt, v in zip(fine.graph.coords, fine.values):
        assert v == pytest.approx(ref[key[point_key(pt)]], abs=1e-12)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_extension_beats_random_competitors(p):
    coarse = TraceValues.from_function(cell_graph(1), smooth)
    fine = decimation_step(coarse, p)
    g = fine.graph
    fixed = np.zeros(g.n_nodes, dtype=bool)
    idx = g.node_index()
    for v in coarse.graph.lattice_nodes[coarse.graph.curve_vertex_indices()]:
        fixed[idx[(3 * int(v[0]), 3 * int(v[1]))]] = True
    best = discrete_energy(fine, p)
    rng = np.random.default_rng(7)
    for scale in (1e-1, 1e-3, 1e-6):
        for _ in range(30):
            v = fine.values.copy()
            v[~fixed] += scale * rng.standard_normal(int((~fixed).sum()))
            assert discrete_energy(TraceValues(g, v), p) >= best * (1 - 1e-13)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_edges_only_extension_preserves_energy(p):
    tr = TraceValues.from_function(cell_graph(2, "edges-only"), smooth)
    levels = decimate_extend(tr, 4, p, convention="edges-only", keep_levels=True)
    e = [discrete_energy(t, p) for t in levels]
    assert e[1:] == pytest.approx([e[0]] * (len(e) - 1), rel=1e-12)


def test_extension_keeps_curve_values():
    tr = TraceValues.from_function(cell_graph(1), smooth)
    fine = decimation_step(tr, 3.0)
    idx = fine.graph.node_index()
    for v, val in zip(tr.graph.lattice_nodes[tr.graph.curve_vertex_indices()], tr.on_curve()):
        assert fine.values[idx[(3 * int(v[0]), 3 * int(v[1]))]] == val


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_joint_extension_no_worse_than_segmentwise(p):
    coarse = TraceValues.from_function(cell_graph(1), smooth)
    joint = decimation_step(coarse, p)
    g = joint.graph
    greedy = np.full(g.n_nodes, np.nan)
    greedy[g.curve_vertex_indices()] = joint.values[g.curve_vertex_indices()]
    ct = coarse.graph.triangles
    for k in range(len(ct)):
        ext = segment_extension(coarse.values[ct[k, 0]], coarse.values[ct[k, 1]], p)
        ft = g.triangles[4 * k:4 * k + 4]
        local = {"a1": ft[0, 1], "apex1": ft[0, 2], "tip": ft[1, 1], "a2": ft[1, 2], "apex4": ft[3, 2]}
        for name, node in local.items():
            if np.isnan(greedy[node]):
                greedy[node] = ext[name]
    assert not np.isnan(greedy).any()
    assert discrete_energy(joint, p) <= discrete_energy(TraceValues(g, greedy), p) * (1 + 1e-13)


def test_fill_apexes_minimizes_over_apexes():
    g = cell_graph(2)
    cv = g.curve_vertex_indices()
    tr = fill_apexes(g, g.coords[cv, 0], 2.0)
    assert np.array_equal(tr.values[cv], g.coords[cv, 0])
    rng = np.random.default_rng(1)
    ap = g.apex_indices()
    best = discrete_energy(tr, 2.0)
    for _ in range(20):
        v = tr.values.copy()
        v[ap] += 1e-2 * rng.standard_normal(len(ap))
        assert discrete_energy(TraceValues(g, v), 2.0) >= best


def test_cell_measure():
    assert mu_cell_measure(CellAddress(1, ())) == 1.0
    assert mu_cell_measure(CellAddress(2, (1, 3))) == 1 / 16
    assert math.fsum(mu_cell_measure(a) for a in iter_addresses(3)) == pytest.approx(3.0, rel=1e-15)


def test_besov_estimate_properties():
    assert besov_seminorm_estimate(lambda x, y: 3.0, 2.0, 2) == 0.0
    for p in (2.0, 3.0):
        one = besov_seminorm_estimate(smooth, p, 2)
        two = besov_seminorm_estimate(lambda x, y: 2 * smooth(x, y), p, 2)
        assert one > 0 and two == pytest.approx(2**p * one, rel=1e-12)
    with pytest.raises(BesovLevelError):
        besov_seminorm_estimate(smooth, 2.0, 6)
