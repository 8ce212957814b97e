import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kochlayer.geometry import C1, Region, locate
from kochlayer.weights import (
    ConductivityField,
    PointOutsideDomain,
    PointOutsideFiber,
    WeightField,
    ball_product,
    conductivity_at,
    muckenhoupt_diagnostic,
    profile_jump_ratio,
    unit_profile,
    weight_at,
)

from .conftest import domain


def plane(col, x, t):
    return col.to_plane(np.array([x, t]))


def test_profile_middle_branch():
    for p in (2.0, 3.0, 4.0):
        assert unit_profile(0.5, 0.1, p) == pytest.approx(0.05, abs=1e-17)


def test_profile_vanishes_at_corners():
    assert unit_profile(0.0, 0.1, 2.0) == 0.0
    assert unit_profile(1.0, 0.1, 3.0) == 0.0
    assert unit_profile(1e-9, 0.1, 2.0) < 1e-9


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_profile_jump_ratio(p):
    eps = 0.1
    a = eps / C1
    left = C1 * a / (2**p + C1**p)
    assert unit_profile(a - 1e-15, eps, p) == pytest.approx(left, rel=1e-12)
    assert unit_profile(a + 1e-12, eps, p) == pytest.approx(eps / 2, rel=1e-12)
    assert left / (eps / 2) == pytest.approx(profile_jump_ratio(p), rel=1e-14)
    assert profile_jump_ratio(p) == pytest.approx(2 / (2**p + C1**p), rel=1e-15)


def test_profile_rejects_out_of_range():
    with pytest.raises(ValueError):
        unit_profile(1.5, 0.1, 2.0)


@pytest.mark.parametrize("n,eps,value", [(1, "1/10", 60.0), (2, "1/10", 180.0)])
def test_weight_on_rectangle(n, eps, value):
    geom = domain(n, eps)
    for col in geom.collars[:: max(1, len(geom.collars) // 7)]:
        assert weight_at(plane(col, 0.5, 0.01), WeightField(geom, 2.0)) == pytest.approx(value, rel=1e-12)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_weight_on_corner_triangles(p):
    geom = domain(1, "1/10")
    col = geom.collars[3]
    for x in (0.05, 0.2, 0.3):
        expect = 3 * (2**p + C1**p) / (C1 * x)
        w = weight_at(plane(col, x, C1 * x / 4), WeightField(geom, p))
        assert w == pytest.approx(expect, rel=1e-9)
        # the T2 corner mirrors T1
        w2 = weight_at(plane(col, 1 - x, C1 * x / 4), WeightField(geom, p))
        assert w2 == pytest.approx(expect, rel=1e-9)


@given(st.floats(0.01, 0.99), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_weight_constant_along_normals(x, s1, s2):
    geom = domain(1, "1/10")
    col = geom.collars[5]
    wf = WeightField(geom, 3.0)
    d = min(C1 * min(x, 1 - x) / 2, 0.05)
    assert weight_at(plane(col, x, s1 * d), wf) == weight_at(plane(col, x, s2 * d), wf)


def test_weight_scales_with_level():
    w1 = weight_at(plane(domain(1, "1/10").collars[0], 0.2, 0.01), WeightField(domain(1, "1/10"), 2.0))
    w2 = weight_at(plane(domain(2, "1/10").collars[0], 0.2, 0.01), WeightField(domain(2, "1/10"), 2.0))
    assert w2 == pytest.approx(3 * w1, rel=1e-12)


def test_weight_outside_fiber():
    geom = domain(1, "1/10")
    with pytest.raises(PointOutsideFiber):
        weight_at((0.5, 0.3), WeightField(geom, 2.0))


def test_conductivity_examples():
    geom = domain(1, "1/10")
    cond = ConductivityField(WeightField(geom, 2.0))
    assert conductivity_at((0.5, 0.3), cond) == 1.0
    col = geom.collars[0]
    assert conductivity_at(plane(col, 0.5, 0.01), cond) == pytest.approx(80.0, rel=1e-12)
    assert ConductivityField(WeightField(domain(2, "1/20"), 3.0)).prefactor == pytest.approx(256 / 81, rel=1e-15)
    annulus = plane(col, 0.5, 0.075)
    assert locate(annulus, geom)[0] == Region.ANNULUS
    assert conductivity_at(annulus, cond) == 1.0
    with pytest.raises(PointOutsideDomain):
        conductivity_at((0.5, -0.8), cond)


def test_shared_patches_single_valued():
    geom = domain(2, "1/20")
    wf = WeightField(geom, 3.0)
    shared = [c for c in geom.collars if c.multiplicity > 1]
    assert shared
    for col in shared[:5]:
        pt = plane(col, 0.3, 0.005)
        assert weight_at(pt, wf) == pytest.approx(float(wf.local(0.3)), rel=1e-12)


def test_ap_unit_weight_is_one():
    geom = domain(1, "1/10")
    wf = WeightField(geom, 3.0, unit=True)
    for center, r in [((0.5, 0.0), 0.05), ((0.2, -0.01), 0.02), ((0.5, 0.3), 0.2)]:
        assert ball_product(wf, center, r, mode="one").product == pytest.approx(1.0, rel=1e-10)


def test_ap_constant_piece_is_one():
    geom = domain(1, "1/10")
    col = geom.collars[0]
    # a ball well inside the rectangle piece, radius below the band depth
    center = plane(col, 0.5, 0.025)
    for p in (2.0, 3.0):
        res = ball_product(WeightField(geom, p), center, 0.1 * 0.05 / 3 * 0.9)
        assert res.product == pytest.approx(1.0, rel=1e-10)


def test_ap_report_shape():
    geom = domain(1, "1/10")
    rep = muckenhoupt_diagnostic(WeightField(geom, 2.0), seed=0)
    assert rep.rows and math.isfinite(rep.supremum)
    assert rep.supremum == max(r.product for r in rep.rows)
    assert rep.supremum >= 1.0 - 1e-12  # Jensen
    again = muckenhoupt_diagnostic(WeightField(geom, 2.0), seed=0)
    assert again.supremum == rep.supremum
