import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kochlayer.catalog import HOLDER
from kochlayer.fem import FemFunction
from kochlayer.geometry import C1, prefractal
from kochlayer.mesh import TAG_FIBER
from kochlayer.operators import (
    average_M_eps,
    extend_G_eps,
    fiber_identity,
    i0_on_side,
    interpolate_In,
    liminf_sides,
    recovery_sequence,
    v_tilde,
)
from kochlayer.weights import unit_profile

from .conftest import fibered

SQ3 = math.sqrt(3.0)


def smooth(x, y):
    return np.sin(3 * x) + y * y


def affine(x, y):
    return 0.3 - 1.2 * np.asarray(x) + 0.7 * np.asarray(y)


@pytest.mark.parametrize("n", [0, 1, 2])
def test_interpolant_reproduces_affine(n):
    I = interpolate_In(affine, n)
    rng = np.random.default_rng(n)
    # random points in the triangle (0,0), (1,0), (1/2, sqrt3/2)
    a, b = rng.random((2, 500))
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    xy = np.stack([a + 0.5 * b, SQ3 / 2 * b], axis=1)
    assert np.allclose(I.evaluate(xy), affine(xy[:, 0], xy[:, 1]), atol=1e-13, rtol=0)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_interpolant_matches_at_curve_vertices(n):
    I = interpolate_In(smooth, n)
    curve = prefractal(n)
    nodal = I.node_values(np.asarray(curve.lattice_vertices))
    assert np.allclose(nodal, I.evaluate(curve.vertices), atol=1e-14, rtol=0)
    assert np.allclose(I.evaluate(curve.vertices), smooth(*curve.vertices.T), atol=1e-14, rtol=0)


def test_holder_constants_stable():
    u = HOLDER["holder-b"]
    c = [interpolate_In(u, n).holder_constant(0.7) for n in (1, 2, 3, 4)]
    # nested node sets, and r**0.7 is 0.7-Holder with constant 1
    assert all(b >= a for a, b in zip(c, c[1:]))
    assert c[-1] <= 1.0 + 1e-12
    assert c[-1] / c[0] < 1.5


def test_G_preserves_constants():
    G = extend_G_eps(lambda x, y: 2.5, Fraction(1, 10))
    xs = np.array([0.5, 0.1, 0.9, 0.3, 0.5])
    ys = np.array([-0.02, -0.01, -0.07, 0.4, -0.5])
    assert np.array_equal(G(xs, ys), np.full(5, 2.5))


def test_G_is_g_away_from_collars():
    G = extend_G_eps(smooth, Fraction(1, 10))
    for pt in [(0.5, 0.4), (0.5, -0.5), (1.3, 0.2)]:
        assert G(*pt) == smooth(*pt)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_G_constant_along_normals_in_inner_band(x, s1, s2):
    eps = 0.1
    G = extend_G_eps(smooth, Fraction(1, 10))
    d = min(C1 * min(x, 1 - x) / 2, eps / 2)
    assert G(x, -s1 * d) == G(x, -s2 * d)
    assert G(x, -s1 * d) == pytest.approx((1 - x) * smooth(0, 0) + x * smooth(1, 0), abs=1e-14)


def test_G_annulus_formula_for_affine_data():
    eps = 0.1
    G = extend_G_eps(affine, Fraction(1, 10))
    uA, uB, uD = affine(0, 0), affine(1, 0), affine(0.5, -SQ3 / 2)
    S = uA + uB - 2 * uD
    rng = np.random.default_rng(3)
    for _ in range(50):
        # rectangle piece: x in the middle, depth between eps/2 and eps
        x = rng.uniform(eps / C1, 1 - eps / C1)
        y = -rng.uniform(eps / 2, eps)
        L = (1 - x) * uA + x * uB
        assert G(x, y) == pytest.approx(L + S * (2 * y + eps) / SQ3, abs=1e-13)
        # corner triangle: depth between C1 x / 2 and C1 x
        x = rng.uniform(0.01, eps / C1)
        y = -rng.uniform(C1 * x / 2, C1 * x)
        L = (1 - x) * uA + x * uB
        assert G(x, y) == pytest.approx(L + S * (2 * y + C1 * x) / SQ3, abs=1e-13)


def test_G_continuous_across_outer_collar_boundary():
    G = extend_G_eps(smooth, Fraction(1, 10))
    for x in (0.05, 0.3, 0.5, 0.8):
        d_out = min(C1 * min(x, 1 - x), 0.1)
        inside, outside = G(x, -d_out * (1 - 1e-9)), G(x, -d_out * (1 + 1e-9))
        assert inside == pytest.approx(outside, abs=1e-7)


def test_i0_on_side_interpolates():
    vals = (1.0, -2.0, 0.5)
    f = i0_on_side(vals, 2)
    assert [f(1.0, 0.0), f(0.5, SQ3 / 2), f(1.5, SQ3 / 2)] == pytest.approx(list(vals), abs=1e-14)


def test_recovery_of_constant():
    mesh = fibered(1, "1/10")
    rec = recovery_sequence(lambda x, y: -1.5, 1, Fraction(1, 10), mesh=mesh)
    assert np.allclose(rec.function.values, -1.5, atol=1e-14, rtol=0)
    res = fiber_identity(rec, 3.0)
    assert res["lhs"] < 1e-30 and res["rhs"] < 1e-30


def test_recovery_constant_along_fiber_normals():
    mesh = fibered(2, "1/20")
    rec = recovery_sequence(smooth, 2, Fraction(1, 20), mesh=mesh)
    fib = np.flatnonzero(mesh.region == TAG_FIBER)
    loc = mesh.local[fib]
    vals = rec.function.values[mesh.triangles[fib]]
    geom = mesh.geometry
    I = rec.interpolant
    up = np.array([I.node_value(geom.collars[c].edge[0]) for c in mesh.collar[fib]])
    uq = np.array([I.node_value(geom.collars[c].edge[1]) for c in mesh.collar[fib]])
    x = loc[..., 0]
    assert np.allclose(vals, (1 - x) * up[:, None] + x * uq[:, None], atol=1e-13, rtol=0)


def test_fiber_factor_example():
    rec = recovery_sequence(smooth, 1, Fraction(1, 10), mesh=fibered(1, "1/10"))
    res = fiber_identity(rec, 2.0)
    assert res["factor"] == pytest.approx(1 + 0.1 * (9 - 4 * SQ3) / (2 - SQ3), rel=1e-14)
    assert res["relative_error"] < 1e-12


@pytest.mark.parametrize("semantics", ["set", "multiset"])
def test_fiber_identity_semantics(semantics):
    rec = recovery_sequence(smooth, 2, Fraction(1, 20), mesh=fibered(2, "1/20"))
    assert fiber_identity(rec, 3.0, semantics)["relative_error"] < 1e-12


def _collar_t(mesh, collar):
    # nodal values of the collar's local normal coordinate on its inner band
    fib = np.flatnonzero((mesh.region == TAG_FIBER) & (mesh.collar == collar))
    vals = np.zeros(mesh.n_vertices)
    vals[mesh.triangles[fib].ravel()] = mesh.local[fib][..., 1].ravel()
    return vals


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_average_of_normal_coordinate(p):
    mesh = fibered(1, "1/10")
    xs = np.array([0.02, 0.1, 0.3, 0.5, 0.77, 0.95])
    for collar in (0, 4):
        _, avg = average_M_eps(FemFunction(mesh, -_collar_t(mesh, collar)), collar, p, xs)
        assert avg == pytest.approx(-unit_profile(xs, 0.1, p) / 2, rel=1e-10)
    _, mid = average_M_eps(FemFunction(mesh, -_collar_t(mesh, 0)), 0, p, [0.5])
    assert mid[0] == pytest.approx(-0.1 / 4, rel=1e-12)


def test_average_of_constant_and_linearity():
    mesh = fibered(1, "1/10")
    c = FemFunction(mesh, np.full(mesh.n_vertices, 4.0))
    _, avg = average_M_eps(c, 2, 3.0)
    assert np.allclose(avg, 4.0, atol=1e-13, rtol=0)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, mesh.n_vertices))
    xs = np.linspace(0, 1, 17)
    _, ma = average_M_eps(FemFunction(mesh, a), 2, 3.0, xs)
    _, mb = average_M_eps(FemFunction(mesh, b), 2, 3.0, xs)
    _, mab = average_M_eps(FemFunction(mesh, 2 * a - 3 * b), 2, 3.0, xs)
    assert np.allclose(mab, 2 * ma - 3 * mb, atol=1e-12, rtol=0)


def test_average_of_recovery_is_linear_along_segment():
    mesh = fibered(2, "1/20")
    rec = recovery_sequence(smooth, 2, Fraction(1, 20), mesh=mesh)
    col = mesh.geometry.collars[5]
    up, uq = rec.interpolant.node_value(col.edge[0]), rec.interpolant.node_value(col.edge[1])
    xs, avg = average_M_eps(rec.function, 5, 2.0)
    assert np.allclose(avg, (1 - xs) * up + xs * uq, atol=1e-13, rtol=0)


def test_v_tilde_examples():
    mesh = fibered(2, "1/20")
    vt = v_tilde(FemFunction(mesh, np.full(mesh.n_vertices, 0.25)), 2.0)
    assert np.all(vt.curve_values == 0.25)
    rec = recovery_sequence(smooth, 2, Fraction(1, 20), mesh=mesh)
    vt = v_tilde(rec.function, 2.0, profiles=True)
    assert np.allclose(vt.curve_values, smooth(*prefractal(2).vertices.T), atol=1e-14, rtol=0)
    assert len(vt.profiles) == 3 * 4**2
    tr = vt.trace()
    assert np.array_equal(tr.on_curve(), vt.curve_values)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_liminf_slack_nonnegative(p):
    mesh = fibered(2, "1/20")
    rec = recovery_sequence(smooth, 2, Fraction(1, 20), mesh=mesh)
    assert liminf_sides(rec.function, p)["slack"] >= 0
    rng = np.random.default_rng(1)
    v = FemFunction(mesh, rng.standard_normal(mesh.n_vertices))
    assert liminf_sides(v, p)["slack"] >= 0
