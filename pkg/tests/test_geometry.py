from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from coneflow.geometry import (
    ConeDivisor,
    Field,
    TriSurface,
    build_doubled_polygon,
    build_football,
    build_pillowcase,
    euler_number,
    make_delaunay,
)
from coneflow.meshio import MeshFormatError, load_mesh, save_mesh


class TestEulerNumber:
    def test_pillowcase_divisor(self):
        assert euler_number(0, ConeDivisor((0, 1, 2, 3), (-0.5,) * 4)) == 0.0

    def test_flat_torus(self):
        assert euler_number(1, ConeDivisor()) == 0.0

    def test_three_sharp_cones(self):
        assert euler_number(0, ConeDivisor((0, 1, 2), (-0.75,) * 3)) == pytest.approx(-0.25)

    def test_negative_genus_rejected(self):
        with pytest.raises(ValueError):
            euler_number(-1, ConeDivisor())


class TestDivisor:
    def test_order_at_minus_one_rejected(self):
        with pytest.raises(ValueError):
            ConeDivisor((0,), (-1.0,))

    def test_repeated_point_rejected(self):
        with pytest.raises(ValueError):
            ConeDivisor((3, 3), (-0.5, -0.5))

    def test_cone_angles_and_sharpness(self):
        d = ConeDivisor((0, 5), (-0.5, 1.0))
        assert d.cone_angles == pytest.approx((math.pi, 4 * math.pi))
        assert not d.all_sharp
        assert d.order_of(5) == 1.0 and d.order_of(7) is None


def test_field_rejects_nan():
    with pytest.raises(FloatingPointError):
        Field(np.array([0.0, np.nan]))


def test_field_is_read_only():
    f = Field(np.zeros(3))
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_background_gauss_bonnet_on_every_preset(all_surfaces):
    for name, s in all_surfaces.items():
        target = 2 * math.pi * s.euler_number
        assert abs(s.K_bg @ s.areas - target) <= 1e-10 * (1 + abs(target)), name


def test_cone_vertices_are_flat(all_surfaces):
    for name, s in all_surfaces.items():
        assert np.all(s.K_bg[s.cone_mask] == 0.0), name


def test_all_weights_nonnegative(all_surfaces):
    for name, s in all_surfaces.items():
        assert s.edge_weights[2].min() >= 0.0, name


class TestFootball:
    @pytest.mark.parametrize("b1,b2", [(-0.5, -0.5), (-0.75, 0.3), (0.0, 0.0), (1.0, -0.2)])
    def test_total_curvature_by_quadrature(self, b1, b2):
        # oracle: -2 pi int h'' drho over the built profile, by adaptive quadrature
        s = build_football(b1, b2, 64)
        p = s.profile
        pts = [p.a, p.b]
        quad, _ = integrate.quad(lambda x: -float(p.d2h(np.array([x]))[0]), 0.0, p.length, points=pts, limit=200)
        assert 2 * math.pi * quad == pytest.approx(2 * math.pi * (2 + b1 + b2), abs=1e-8)
        assert s.K_bg @ s.areas == pytest.approx(2 * math.pi * (2 + b1 + b2), abs=1e-10)

    def test_tips_are_exact_cones(self):
        s = build_football(-0.5, -0.25, 64)
        p = s.profile
        near0 = np.linspace(0, 0.2 * p.length, 50)
        nearL = p.length - near0
        np.testing.assert_allclose(p.h(near0), 0.5 * near0, rtol=0, atol=1e-15)
        np.testing.assert_allclose(p.h(nearL), 0.75 * near0, rtol=0, atol=1e-14)

    def test_profile_positive(self):
        s = build_football(-0.9, 2.0, 64)
        rho = np.linspace(0, s.profile.length, 1001)[1:-1]
        assert s.profile.h(rho).min() > 0

    def test_mirror_symmetry(self):
        s = build_football(-0.4, -0.4, 64)
        rho = np.linspace(0, s.profile.length, 301)
        np.testing.assert_allclose(s.profile.h(rho), s.profile.h(s.profile.length - rho), atol=1e-13)
        np.testing.assert_allclose(s.areas, s.areas[::-1], rtol=1e-12)

    def test_plateau_is_flat(self):
        s = build_football(-0.5, -0.5, 128, plateau=0.3)
        mid = np.abs(s.rho - 0.5 * s.profile.length) < 0.1 * s.profile.length
        assert np.max(np.abs(s.K_bg[mid])) < 1e-12

    @pytest.mark.parametrize("kw", [dict(beta1=-1.0), dict(n=8), dict(length=0.0)])
    def test_bad_arguments(self, kw):
        args = dict(beta1=-0.5, beta2=-0.5, n=32, length=math.pi)
        args.update(kw)
        with pytest.raises(ValueError):
            build_football(**args)

    def test_smooth_sphere_total_curvature(self):
        s = build_football(0.0, 0.0, 256)
        assert s.K_bg @ s.areas == pytest.approx(4 * math.pi, abs=1e-10)


class TestDoubledPolygon:
    def test_pillowcase_structure(self, pillow):
        assert pillow.divisor.orders == (-0.5,) * 4
        assert pillow.euler_number == 0.0
        assert np.max(np.abs(pillow.K_bg)) < 1e-9
        assert pillow.areas.sum() == pytest.approx(8.0, rel=1e-12)

    def test_hyperbolic_area_matches_defect_formula(self):
        s = build_doubled_polygon("hyperbolic", (0.25, 0.25, 0.25), 6)
        assert s.euler_number == pytest.approx(-0.25)
        assert s.areas.sum() == pytest.approx(math.pi / 2, rel=1e-2)
        assert s.K_bg @ s.areas == pytest.approx(-math.pi / 2, abs=1e-10)

    def test_hyperbolic_interior_curvature_near_minus_one(self):
        s = build_doubled_polygon("hyperbolic", (0.25, 0.25, 0.25), 16)
        far = s.tip_distance > 0.3
        assert np.median(s.K_bg[far]) == pytest.approx(-1.0, abs=0.05)

    def test_euclidean_triangle_orders(self, euclid_triangle):
        assert euclid_triangle.divisor.orders == pytest.approx((-0.5, -2 / 3, -5 / 6))
        assert np.max(np.abs(euclid_triangle.K_bg)) < 1e-9

    @pytest.mark.parametrize(
        "kind,angles",
        [("euclidean", (0.5, 0.5, 0.5)), ("hyperbolic", (0.5, 0.3, 0.3)), ("spherical", (0.5, 0.5, 0.5)), ("euclidean", (0.6, 0.4, 0.6, 0.4))],
    )
    def test_unrealizable_data(self, kind, angles):
        with pytest.raises(ValueError):
            build_doubled_polygon(kind, angles, 4)

    def test_rectangle_sides(self):
        s = build_pillowcase(6, (2.0, 1.0))
        assert s.areas.sum() == pytest.approx(4.0, rel=1e-12)


def test_delaunay_flip_removes_obtuse_pair():
    # a thin rhombus split along its long diagonal: two angles opposite the diagonal are obtuse
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    d = 2.0
    side = math.hypot(1.0, 0.2)
    lens = np.array([[side, side, d], [d, side, side]])
    new_tris, new_lens, flips = make_delaunay(tris, lens)
    assert flips == 1
    assert sorted(map(sorted, new_tris.tolist())) == [[0, 1, 3], [1, 2, 3]]
    assert new_lens.max() == pytest.approx(side)


class TestTriSurfaceValidation:
    def test_triangle_inequality(self):
        with pytest.raises(ValueError, match="triangle inequality"):
            TriSurface(4, [[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]], [[1, 1, 3]] + [[1, 1, 1]] * 3)

    def test_open_surface_rejected(self):
        with pytest.raises(ValueError, match="closed manifold"):
            TriSurface(3, [[0, 1, 2]], [[1, 1, 1]])

    def test_cone_angle_mismatch(self):
        # regular tetrahedron: angle sum pi at every vertex, so order -1/2 fits and -0.4 does not
        tris = [[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]]
        ok = TriSurface(4, tris, [[1, 1, 1]] * 4, ConeDivisor((0, 1, 2, 3), (-0.5,) * 4))
        assert ok.euler_number == 0.0
        with pytest.raises(ValueError, match="cone vertex"):
            TriSurface(4, tris, [[1, 1, 1]] * 4, ConeDivisor((0,), (-0.4,)))


class TestMeshIO:
    def test_round_trip_is_bitwise(self, pillow, tmp_path):
        path = tmp_path / "p.conemesh"
        save_mesh(pillow, path)
        back = load_mesh(path)
        assert np.array_equal(back.lengths, pillow.lengths)
        assert np.array_equal(back.triangles, pillow.triangles)
        assert back.divisor == pillow.divisor

    def _write(self, tmp_path, body):
        p = tmp_path / "m.conemesh"
        p.write_text(body)
        return p

    TET = "conemesh 1\nvertices 4\ntriangles 4\n0 1 2 {a} 1 1\n0 2 3 1 1 1\n0 3 1 1 1 {a}\n1 3 2 1 1 1\ncones 1\n0 {beta}\n"

    def test_beta_minus_one_rejected(self, tmp_path):
        p = self._write(tmp_path, self.TET.format(a=1, beta=-1))
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(p)
        assert exc.value.line == 9

    def test_triangle_inequality_rejected(self, tmp_path):
        body = "conemesh 1\nvertices 4\ntriangles 4\n0 1 2 1 1 3\n0 2 3 1 1 1\n0 3 1 1 1 1\n1 3 2 1 1 1\ncones 0\n"
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(self._write(tmp_path, body))
        assert exc.value.line == 4

    def test_truncated_file(self, tmp_path):
        with pytest.raises(MeshFormatError):
            load_mesh(self._write(tmp_path, "conemesh 1\nvertices 4\ntriangles 4\n0 1 2 1 1 1\n"))

    def test_bad_header(self, tmp_path):
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(self._write(tmp_path, "# comment\nmesh 2\n"))
        assert exc.value.line == 2


@settings(max_examples=25, deadline=None)
@given(
    b1=st.floats(-0.95, 3.0),
    b2=st.floats(-0.95, 3.0),
)
def test_football_gauss_bonnet_property(b1, b2):
    s = build_football(b1, b2, 32)
    target = 2 * math.pi * (2 + b1 + b2)
    assert abs(s.K_bg @ s.areas - target) <= 1e-10 * (1 + abs(target))
    assert s.euler_number == pytest.approx(2 + b1 + b2)
