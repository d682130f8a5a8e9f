import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from regfuse import geometry as G
from regfuse.geometry import AffineParams, DeformationField, SingularTransformError
from regfuse.simulate import AugmentationRanges, ElasticParams, gen_affine, gen_deformation_field

shift = st.floats(-0.5, 0.5, allow_nan=False)


@st.composite
def affines(draw):
    """Rotation x anisotropic scale (optionally reflected) x shear; |det| >= 0.09."""
    ang = draw(st.floats(-math.pi, math.pi))
    s1, s2 = draw(st.floats(0.3, 2.0)), draw(st.floats(0.3, 2.0))
    if draw(st.booleans()):
        s2 = -s2
    sh = draw(st.floats(-1.0, 1.0))
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    lin = rot @ np.diag([s1, s2]) @ np.array([[1.0, sh], [0.0, 1.0]])
    return AffineParams(*lin.ravel(), draw(shift), draw(shift))


def rotation(deg, dx=0.0, dy=0.0):
    r = math.radians(deg)
    return AffineParams(math.cos(r), -math.sin(r), math.sin(r), math.cos(r), dx, dy)


class TestAffineParams:
    def test_rejects_singular(self):
        with pytest.raises(SingularTransformError):
            AffineParams(1, 1, 1, 1)
        with pytest.raises(ValueError):
            AffineParams(a=math.inf)

    def test_json_round_trip(self, tmp_path):
        t = rotation(7, 0.1, -0.2)
        G.save_affine(t, tmp_path / "t.json")
        assert G.load_affine(tmp_path / "t.json") == t

    def test_from_dict_requires_all_keys(self):
        with pytest.raises(ValueError):
            AffineParams.from_dict({"a": 1})


class TestInverseAndCompose:
    def test_identity_inverse(self):
        assert G.invert_affine(AffineParams.identity()) == AffineParams.identity()

    def test_translation_inverse(self):
        inv = G.invert_affine(AffineParams(1, 0, 0, 1, 0.1, -0.05))
        assert inv.as_tuple() == pytest.approx((1, 0, 0, 1, -0.1, 0.05), abs=1e-15)

    def test_rotation_inverse_via_matrix(self):
        t = rotation(10, 0.2, -0.1)
        c = G.compose_affine(t, G.invert_affine(t))
        assert np.max(np.abs(np.array(c.as_tuple()) - (1, 0, 0, 1, 0, 0))) <= 1e-12
        inv_oracle = oracles.from_homogeneous(np.linalg.inv(oracles.homogeneous(t.as_tuple())))
        assert G.invert_affine(t).as_tuple() == pytest.approx(inv_oracle, abs=1e-12)

    def test_near_singular_rejected(self):
        with pytest.raises(SingularTransformError):
            AffineParams(1e-5, 0, 0, 1e-4)
        t = AffineParams()
        object.__setattr__(t, "a", 0.0)  # bypass validation to reach invert's own guard
        with pytest.raises(SingularTransformError):
            G.invert_affine(t)

    @given(affines(), affines())
    def test_compose_matches_matrix_product(self, t1, t2):
        want = oracles.from_homogeneous(oracles.homogeneous(t2.as_tuple())
                                        @ oracles.homogeneous(t1.as_tuple()))
        assert G.compose_affine(t1, t2).as_tuple() == pytest.approx(want, abs=1e-12)

    @given(affines())
    def test_compose_with_identity(self, t):
        assert G.compose_affine(t, AffineParams.identity()) == t
        assert G.compose_affine(AffineParams.identity(), t) == t

    def test_opposite_translations_cancel(self):
        a, b = AffineParams(dx=0.3, dy=-0.2), AffineParams(dx=-0.3, dy=0.2)
        assert G.compose_affine(a, b) == AffineParams.identity()

    @given(affines())
    def test_inverse_is_involution(self, t):
        back = G.invert_affine(G.invert_affine(t))
        assert back.as_tuple() == pytest.approx(t.as_tuple(), abs=1e-12)

    @given(affines())
    def test_compose_with_inverse_is_identity(self, t):
        c = G.compose_affine(t, G.invert_affine(t))
        assert c.as_tuple() == pytest.approx((1, 0, 0, 1, 0, 0), abs=1e-12)


class TestPixelConversion:
    @given(affines(), st.integers(2, 300), st.integers(2, 300))
    def test_round_trip(self, t, h, w):
        back = G.affine_from_pixels(G.affine_to_pixels(t, (h, w)), (h, w))
        assert back.as_tuple() == pytest.approx(t.as_tuple(), abs=1e-12)

    @given(affines(), st.integers(2, 50), st.integers(2, 50))
    def test_matches_normalized_mapping(self, t, h, w):
        m = G.affine_to_pixels(t, (h, w))
        for x, y in [(0, 0), (w - 1, 0), (3 % w, (h - 1) // 2)]:
            want = oracles.map_pixel(t.as_tuple(), x, y, h, w)
            got = m @ np.array([x, y, 1.0])
            assert got[:2] == pytest.approx(want, abs=1e-9)

    def test_pixel_shift_sign(self):
        t = AffineParams.from_pixel_shift(2.0, -1.0, (10, 20))
        m = G.affine_to_pixels(t, (10, 20))
        np.testing.assert_allclose(m @ [5, 5, 1], [7, 4, 1], atol=1e-12)


class TestApplyAffine:
    def test_identity_is_bit_exact(self, rng):
        img = rng.random((17, 23))
        assert np.array_equal(G.apply_affine(img, AffineParams.identity()), img)

    def test_integer_shift_moves_content(self, rng):
        img = rng.random((6, 8))
        out = G.apply_affine(img, AffineParams.from_pixel_shift(-1, 0, img.shape))
        np.testing.assert_array_equal(out[:, 1:], img[:, :-1])
        assert np.all(out[:, 0] == 0.0)

    def test_rotated_ramp_matches_per_pixel_oracle(self):
        ys, xs = np.mgrid[0:64, 0:64]
        ramp = (xs + 2 * ys) / 192.0
        t = rotation(10, 0.03, -0.02)
        np.testing.assert_allclose(G.apply_affine(ramp, t),
                                   oracles.warp_affine(ramp, t.as_tuple()), atol=1e-9)

    @given(st.floats(0, 5), st.integers(0, 10 ** 6))
    def test_linear_in_intensity(self, alpha, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((9, 11))
        t = gen_affine(AugmentationRanges(), img.shape, seed)
        np.testing.assert_allclose(G.apply_affine(alpha * img, t),
                                   alpha * G.apply_affine(img, t), rtol=0, atol=1e-12)

    @given(st.integers(-4, 4), st.integers(-4, 4), st.integers(0, 1000))
    def test_integer_translation_is_exact_shift(self, tx, ty, seed):
        img = np.random.default_rng(seed).random((9, 12))
        out, inside = G.apply_affine(img, AffineParams.from_pixel_shift(tx, ty, img.shape),
                                     with_inside=True)
        h, w = img.shape
        want = np.zeros_like(img)
        for y in range(h):
            for x in range(w):
                if 0 <= x + tx < w and 0 <= y + ty < h:
                    want[y, x] = img[y + ty, x + tx]
        np.testing.assert_array_equal(out, want)
        assert inside.sum() == max(w - abs(tx), 0) * max(h - abs(ty), 0)


class TestDeformation:
    def test_zero_field_is_bit_exact(self, rng):
        img = rng.random((13, 9))
        assert np.array_equal(G.apply_deformation(img, DeformationField.zeros(img.shape)), img)

    def test_uniform_field_matches_translation(self, rng):
        img = rng.random((12, 12))
        phi = DeformationField(np.ones(img.shape), np.zeros(img.shape))
        np.testing.assert_allclose(
            G.apply_deformation(img, phi),
            G.apply_affine(img, AffineParams.from_pixel_shift(1, 0, img.shape)), atol=1e-12)

    def test_matches_per_pixel_oracle(self):
        phi = gen_deformation_field((32, 32), ElasticParams(sigma=4, k=6, amplitude=20), 3)
        img = np.random.default_rng(0).random((32, 32))
        np.testing.assert_allclose(G.apply_deformation(img, phi),
                                   oracles.warp_field(img, phi.dx, phi.dy), atol=1e-9)

    def test_inverse_is_negation(self):
        phi = DeformationField(np.full((3, 3), 2.0), np.zeros((3, 3)))
        inv = G.invert_deformation(phi)
        assert np.all(inv.dx == -2.0) and np.all(inv.dy == 0.0)
        z = G.invert_deformation(DeformationField.zeros((2, 2)))
        assert not np.any(z.dx) and not np.any(z.dy)

    def test_smooth_field_round_trip(self):
        from regfuse.simulate import synthetic_scene
        img = synthetic_scene((128, 128), seed=4)
        phi = gen_deformation_field(img.shape, ElasticParams(), 11)
        peak = float(np.max(np.hypot(phi.dx, phi.dy)))
        phi = DeformationField(phi.dx * 2 / peak, phi.dy * 2 / peak)  # amplitude <= 2 px
        fwd, in1 = G.apply_deformation(img, phi, with_inside=True)
        back, in2 = G.apply_deformation(fwd, -phi, with_inside=True)
        interior = in1 & in2
        assert np.sqrt(np.mean((back - img)[interior] ** 2)) <= 0.01

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            G.apply_deformation(np.zeros((4, 4)), DeformationField.zeros((4, 5)))

    def test_field_validation(self):
        with pytest.raises(ValueError):
            DeformationField(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            DeformationField(np.full((2, 2), np.nan), np.zeros((2, 2)))

    def test_pfm_round_trip(self, tmp_path):
        phi = gen_deformation_field((16, 20), ElasticParams(sigma=4, k=5), 1)
        G.save_field(phi, tmp_path / "p.pfm")
        back = G.load_field(tmp_path / "p.pfm")
        np.testing.assert_array_equal(back.dx, phi.dx.astype(np.float32))
        np.testing.assert_array_equal(back.dy, phi.dy.astype(np.float32))


def test_corner_error():
    shape = (11, 21)
    t = AffineParams.identity()
    assert G.corner_endpoint_error(t, t, shape) == 0.0
    s = AffineParams.from_pixel_shift(3.0, 4.0, shape)
    assert G.corner_endpoint_error(s, t, shape) == pytest.approx(5.0)
