from dataclasses import replace

import numpy as np
import pytest
from shapely.geometry import Polygon
from shapely.ops import unary_union

from kochlayer.geometry import C1, prefractal
from kochlayer.mesh import (
    TAG_ANNULUS,
    TAG_BULK,
    TAG_FIBER,
    MeshParams,
    mesh_fibered_domain,
    mesh_omega_star,
    mesh_prefractal,
    read_off,
    refine_uniform,
    summary,
    validate,
    write_off,
)

from .conftest import domain, fibered

CASES = [(1, "1/10"), (2, "1/20"), (3, "1/40")]


@pytest.mark.parametrize("n,eps", CASES)
def test_fibered_mesh_is_valid(n, eps):
    rep = validate(fibered(n, eps))
    assert rep.ok, rep.violations


@pytest.mark.parametrize("n,eps", CASES)
def test_region_areas_match_exact_polygons(n, eps):
    geom = domain(n, eps)
    mesh = fibered(n, eps)
    e = geom.eps_float
    L2 = 9.0**-n
    band = e / 2 * (1 - e / C1) * L2 * len(geom.collars)  # trapezoid area per collar
    assert mesh.region_area(TAG_FIBER) == pytest.approx(band, rel=1e-12)
    assert mesh.region_area(TAG_ANNULUS) == pytest.approx(band, rel=1e-12)
    inner = unary_union([Polygon(p.float_polygon()) for p in geom.patches() if p.band == "inner"])
    assert mesh.region_area(TAG_FIBER) == pytest.approx(inner.area, rel=1e-9)
    assert mesh.areas.sum() == pytest.approx(geom.domain_area(), rel=1e-12)


@pytest.mark.parametrize("n,eps", CASES[:2])
def test_every_element_inside_one_region(n, eps):
    # every element centroid classifies into the element's own tag
    from kochlayer.geometry import Region, locate

    mesh = fibered(n, eps)
    geom = domain(n, eps)
    names = {TAG_BULK: Region.BULK, TAG_FIBER: Region.INNER, TAG_ANNULUS: Region.ANNULUS}
    rng = np.random.default_rng(0)
    sample = rng.choice(mesh.n_triangles, 400, replace=False)
    cen = mesh.points[mesh.triangles[sample]].mean(axis=1)
    for k, c in zip(sample, cen):
        assert locate(c, geom)[0] == names[int(mesh.region[k])]


def test_curve_vertices_are_mesh_vertices():
    mesh = fibered(2, "1/20")
    verts = prefractal(2).vertices
    d = np.linalg.norm(mesh.points[None, :, :] - verts[:, None, :], axis=2).min(axis=1)
    assert d.max() < 1e-14
    assert mesh.curve_vertex.sum() == 3 * 4**2


@pytest.mark.parametrize("n,eps", CASES)
def test_fiber_jacobians_are_scaled_reference(n, eps):
    mesh = fibered(n, eps)
    sel = (mesh.region == TAG_FIBER) | (mesh.region == TAG_ANNULUS)
    loc = mesh.local[sel]
    ref_area = 0.5 * np.abs(
        (loc[:, 1, 0] - loc[:, 0, 0]) * (loc[:, 2, 1] - loc[:, 0, 1])
        - (loc[:, 2, 0] - loc[:, 0, 0]) * (loc[:, 1, 1] - loc[:, 0, 1])
    )
    assert np.allclose(mesh.areas[sel], 9.0**-n * ref_area, rtol=1e-9, atol=0)


def test_coincident_collars_get_congruent_elements():
    mesh = fibered(2, "1/20")
    fib = np.flatnonzero(mesh.region == TAG_FIBER)
    by = {}
    for k in fib:
        by.setdefault(int(mesh.collar[k]), []).append(np.round(mesh.local[k], 12).tolist())
    shapes = {tuple(map(str, sorted(v))) for v in by.values()}
    assert len(shapes) == 1


def test_uniform_refinement_quadruples():
    mesh = fibered(1, "1/10")
    fine = refine_uniform(mesh)
    assert fine.n_triangles == 4 * mesh.n_triangles
    for tag in (TAG_BULK, TAG_FIBER, TAG_ANNULUS):
        assert np.sum(fine.region == tag) == 4 * np.sum(mesh.region == tag)
        assert fine.region_area(tag) == pytest.approx(mesh.region_area(tag), rel=1e-12)
    assert validate(fine).ok


@pytest.mark.parametrize("n", [0, 1, 2])
def test_omega_star_nested(n):
    coarse, fine = mesh_omega_star(n), mesh_omega_star(n + 1)
    d = np.linalg.norm(fine.points[None, :, :] - coarse.points[:, None, :], axis=2).min(axis=1)
    assert d.max() < 1e-14
    # every child centroid lies in exactly one parent triangle
    cen = fine.points[fine.triangles].mean(axis=1)
    p = coarse.points[coarse.triangles]
    v0, v1, v2 = p[:, 0], p[:, 1], p[:, 2]
    det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])
    for c in cen:
        l1 = ((c[0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (c[1] - v0[:, 1])) / det
        l2 = ((v1[:, 0] - v0[:, 0]) * (c[1] - v0[:, 1]) - (c[0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])) / det
        inside = (l1 > 1e-12) & (l2 > 1e-12) & (1 - l1 - l2 > 1e-12)
        assert inside.sum() == 1
    assert fine.areas.sum() == pytest.approx(coarse.areas.sum(), rel=1e-13)
    assert coarse.areas.sum() == pytest.approx(np.sqrt(3), rel=1e-13)


def test_level_one_vertices_in_t1():
    mesh = mesh_omega_star(1)
    verts = prefractal(1).vertices
    d = np.linalg.norm(mesh.points[None, :, :] - verts[:, None, :], axis=2).min(axis=1)
    assert d.max() < 1e-14


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_prefractal_mesh_area(m):
    assert mesh_prefractal(m).areas.sum() == pytest.approx(prefractal(m).area(), rel=1e-13)
    assert validate(mesh_prefractal(m)).ok


def test_validate_flags_flipped_triangle():
    mesh = fibered(1, "1/10")
    tris = mesh.triangles.copy()
    tris[7] = tris[7, ::-1]
    assert "orientation" in validate(replace(mesh, triangles=tris)).kinds()


def test_validate_flags_missing_interface_edge():
    mesh = fibered(1, "1/10")
    markers = dict(mesh.markers)
    markers["gamma"] = markers["gamma"][1:]
    assert "tag-consistency" in validate(replace(mesh, markers=markers)).kinds()


def test_validate_flags_retagged_element():
    mesh = fibered(1, "1/10")
    region = mesh.region.copy()
    region[np.flatnonzero(region == TAG_FIBER)[0]] = TAG_ANNULUS
    assert "tag-consistency" in validate(replace(mesh, region=region)).kinds()


def test_mesh_params_validation():
    with pytest.raises(ValueError):
        MeshParams(grading=1.5)
    with pytest.raises(ValueError):
        MeshParams(fiber_layers=0)


def test_more_layers_keep_areas():
    geom = domain(1, "1/10")
    mesh = mesh_fibered_domain(geom, MeshParams(fiber_layers=3, depth=2))
    assert validate(mesh).ok
    assert mesh.region_area(TAG_FIBER) == pytest.approx(fibered(1, "1/10").region_area(TAG_FIBER), rel=1e-12)


def test_threads_give_identical_mesh():
    geom = domain(2, "1/20")
    a = mesh_fibered_domain(geom, threads=1)
    b = mesh_fibered_domain(geom, threads=3)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.triangles, b.triangles)


def test_off_roundtrip(tmp_path):
    mesh = fibered(1, "1/10")
    path = tmp_path / "m.off"
    write_off(mesh, path)
    pts, tris = read_off(path)
    assert np.array_equal(pts, mesh.points) and np.array_equal(tris, mesh.triangles)
    assert (tmp_path / "m.off.json").exists()
    s = summary(mesh)
    assert s["triangles"] == mesh.n_triangles and s["min_angle_deg"] > 0
