import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visnir_fuse.geometry import (
    CameraIntrinsics,
    GeometryError,
    Homography,
    RigGeometry,
    load_rig_file,
    plane_homography,
    warp_to_vis,
)
from visnir_fuse.rasters import RasterImage


# --- independent 3x3 matrix oracle (pure python, no numpy.linalg) ----------

def mat_mul(a, b):
    return [
        [sum(a[i][t] * b[t][j] for t in range(3)) for j in range(3)]
        for i in range(3)
    ]


def mat_inv(a):
    det = (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
    cof = [
        [
            a[1][1] * a[2][2] - a[1][2] * a[2][1],
            a[0][2] * a[2][1] - a[0][1] * a[2][2],
            a[0][1] * a[1][2] - a[0][2] * a[1][1],
        ],
        [
            a[1][2] * a[2][0] - a[1][0] * a[2][2],
            a[0][0] * a[2][2] - a[0][2] * a[2][0],
            a[0][2] * a[1][0] - a[0][0] * a[1][2],
        ],
        [
            a[1][0] * a[2][1] - a[1][1] * a[2][0],
            a[0][1] * a[2][0] - a[0][0] * a[2][1],
            a[0][0] * a[1][1] - a[0][1] * a[1][0],
        ],
    ]
    return [[cof[i][j] / det for j in range(3)] for i in range(3)]


def oracle_homography(k_vis, k_nir, r, t, n, d):
    kv = [[k_vis.fx, 0.0, k_vis.cx], [0.0, k_vis.fy, k_vis.cy], [0.0, 0.0, 1.0]]
    kn = [[k_nir.fx, 0.0, k_nir.cx], [0.0, k_nir.fy, k_nir.cy], [0.0, 0.0, 1.0]]
    mid = [[r[i][j] + t[i] * n[j] / d for j in range(3)] for i in range(3)]
    h = mat_mul(mat_mul(kv, mid), mat_inv(kn))
    scale = h[2][2]
    if scale != 0.0:
        h = [[v / scale for v in row] for row in h]
    return np.array(h)


IDENTITY_K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)


def make_rig(r=None, t=(0.0, 0.0, 0.0), n=(0.0, -1.0, 0.0), d=1.0):
    return RigGeometry(
        rotation=np.eye(3) if r is None else np.asarray(r),
        translation=np.asarray(t, dtype=float),
        plane_normal=np.asarray(n, dtype=float),
        plane_distance=d,
    )


class TestPlaneHomography:
    def test_identity_everything(self):
        h = plane_homography(IDENTITY_K, IDENTITY_K, make_rig())
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-15)

    def test_intrinsics_cancel_for_identity_rig(self):
        k = CameraIntrinsics(721.5, 722.3, 640.1, 239.9)
        h = plane_homography(k, k, make_rig())
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-12)

    def test_against_matrix_oracle(self):
        k = CameraIntrinsics(500.0, 500.0, 600.0, 240.0)
        rig = make_rig(t=(0.0, -0.2, 0.0), n=(0.0, -1.0, 0.0), d=1.5)
        h = plane_homography(k, k, rig)
        expect = oracle_homography(
            k, k, np.eye(3).tolist(), [0.0, -0.2, 0.0], [0.0, -1.0, 0.0], 1.5
        )
        np.testing.assert_allclose(h.matrix, expect, atol=1e-9)

    def test_random_rigs_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            kv = CameraIntrinsics(*rng.uniform(300, 900, 2), *rng.uniform(100, 700, 2))
            kn = CameraIntrinsics(*rng.uniform(300, 900, 2), *rng.uniform(100, 700, 2))
            angle = rng.uniform(-0.2, 0.2)
            c, s = math.cos(angle), math.sin(angle)
            r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            t = rng.uniform(-0.5, 0.5, 3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d = rng.uniform(0.5, 5.0)
            h = plane_homography(kv, kn, RigGeometry(r, t, n, d))
            expect = oracle_homography(kv, kn, r.tolist(), t.tolist(), n.tolist(), d)
            np.testing.assert_allclose(h.matrix, expect, atol=1e-9)

    def test_scale_canonical(self):
        # scaling t and d together leaves the plane geometry unchanged
        k = CameraIntrinsics(450.0, 470.0, 300.0, 200.0)
        h1 = plane_homography(k, k, make_rig(t=(0.0, -0.2, 0.05), d=1.5))
        h2 = plane_homography(k, k, make_rig(t=(0.0, -0.6, 0.15), d=4.5))
        np.testing.assert_allclose(h1.matrix, h2.matrix, atol=1e-12)

    def test_invariant_violations(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(-1.0, 1.0, 0.0, 0.0)
        with pytest.raises(GeometryError):
            make_rig(r=np.eye(3) * 2.0)
        with pytest.raises(GeometryError):
            make_rig(n=(0.0, -2.0, 0.0))
        with pytest.raises(GeometryError):
            make_rig(d=0.0)
        with pytest.raises(GeometryError):
            Homography(np.zeros((3, 3)))


def naive_warp(image: RasterImage, h: np.ndarray, out_w: int, out_h: int):
    """Destination-scan bilinear warp written with explicit per-pixel loops."""
    hi = mat_inv([list(map(float, row)) for row in h])
    src = image.samples.astype(np.float64)
    if src.ndim == 2:
        src = src[:, :, None]
    sh, sw, ch = src.shape
    out = np.zeros((out_h, out_w, ch))
    mask = np.zeros((out_h, out_w), dtype=bool)
    for y in range(out_h):
        for x in range(out_w):
            wz = hi[2][0] * x + hi[2][1] * y + hi[2][2]
            if abs(wz) <= 1e-12:
                continue
            sx = (hi[0][0] * x + hi[0][1] * y + hi[0][2]) / wz
            sy = (hi[1][0] * x + hi[1][1] * y + hi[1][2]) / wz
            if not (0 <= sx <= sw - 1 and 0 <= sy <= sh - 1):
                continue
            mask[y, x] = True
            x0 = min(int(math.floor(sx)), sw - 2) if sw > 1 else 0
            y0 = min(int(math.floor(sy)), sh - 2) if sh > 1 else 0
            fx, fy = sx - x0, sy - y0
            for c in range(ch):
                v = (
                    (1 - fx) * (1 - fy) * src[y0, x0, c]
                    + fx * (1 - fy) * src[y0, min(x0 + 1, sw - 1), c]
                    + (1 - fx) * fy * src[min(y0 + 1, sh - 1), x0, c]
                    + fx * fy * src[min(y0 + 1, sh - 1), min(x0 + 1, sw - 1), c]
                )
                out[y, x, c] = v
    limit = 2**image.depth - 1
    quant = np.clip(np.rint(out), 0, limit).astype(image.samples.dtype)
    if image.samples.ndim == 2:
        quant = quant[:, :, 0]
    return quant, mask


def gradient_image(h=16, w=16):
    ys, xs = np.mgrid[0:h, 0:w]
    return RasterImage(((xs * 13 + ys * 7) % 256).astype(np.uint8))


class TestWarp:
    def test_identity_is_exact(self):
        img = gradient_image()
        out, mask = warp_to_vis(img, Homography.identity(), img.width, img.height)
        assert mask.all()
        np.testing.assert_array_equal(out.samples, img.samples)

    def test_translation_shift(self):
        img = gradient_image()
        h = Homography(np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        out, mask = warp_to_vis(img, h, img.width, img.height)
        assert not mask[:, :2].any()
        assert mask[:, 2:].all()
        np.testing.assert_array_equal(out.samples[:, 2:], img.samples[:, :-2])
        assert (out.samples[:, :2] == 0).all()

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(3)
        img = gradient_image()
        for _ in range(5):
            jitter = np.eye(3) + rng.uniform(-0.02, 0.02, (3, 3)) * np.array(
                [[1, 1, 20], [1, 1, 20], [0.01, 0.01, 1]]
            )
            jitter[2, 2] = 1.0
            h = Homography(jitter)
            out, mask = warp_to_vis(img, h, img.width, img.height)
            expect, expect_mask = naive_warp(img, h.matrix, img.width, img.height)
            np.testing.assert_array_equal(mask, expect_mask)
            np.testing.assert_array_equal(out.samples, expect)

    def test_roundtrip_error_small(self):
        # smooth radiometric content; bilinear cannot round-trip white noise
        ys, xs = np.mgrid[0:32, 0:32]
        img = RasterImage(
            (128 + 100 * np.sin(xs / 6.0) * np.cos(ys / 7.0)).astype(np.uint8)
        )
        h = Homography(
            np.array([[1.01, 0.004, -1.2], [-0.003, 0.99, 0.7], [1e-5, -1e-5, 1.0]])
        )
        fwd, m1 = warp_to_vis(img, h, 32, 32)
        back, m2 = warp_to_vis(fwd, h.inverse(), 32, 32)
        both = m1 & m2
        assert both.any()
        diff = np.abs(back.samples.astype(float) - img.samples.astype(float))[both]
        assert diff.mean() < 2.0

    def test_constant_image_preserved(self):
        img = RasterImage(np.full((12, 12), 77, np.uint8))
        h = Homography(np.array([[1.0, 0.01, 0.3], [0.0, 1.0, -0.2], [0.0, 0.0, 1.0]]))
        out, mask = warp_to_vis(img, h, 12, 12)
        assert (out.samples[mask] == 77).all()

    def test_16bit_warp(self):
        img = RasterImage((np.arange(64, dtype=np.uint16).reshape(8, 8) * 900).astype(np.uint16))
        out, mask = warp_to_vis(img, Homography.identity(), 8, 8)
        np.testing.assert_array_equal(out.samples, img.samples)
        assert out.depth == 16


class TestRigFile:
    def test_load(self, tmp_path):
        p = tmp_path / "rig.txt"
        p.write_text(
            "# camera rig\n"
            "vis_intrinsics = 500 500 600 240\n"
            "nir_intrinsics = 480 480 590 250\n"
            "rotation = 1 0 0 0 1 0 0 0 1\n"
            "translation = 0 -0.2 0\n"
            "plane_normal = 0 -1 0\n"
            "plane_distance = 1.5\n"
        )
        k_vis, k_nir, rig = load_rig_file(p)
        assert k_vis.fx == 500 and k_nir.cy == 250
        assert rig.plane_distance == 1.5
        h = plane_homography(k_vis, k_nir, rig)
        assert h.matrix.shape == (3, 3)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "rig.txt"
        p.write_text("vis_intrinsics = 1 1 0 0\n")
        with pytest.raises(GeometryError, match="missing key"):
            load_rig_file(p)
