import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphkit.geometry import (AlignmentConfig, AlignmentError, LandmarkParseError, LandmarkSet,
                               TriangleMesh, TriangulationError, align_face, alpha_blend,
                               average_landmarks, classical_morph, delaunay_triangulate,
                               load_image, load_landmarks, piecewise_affine_warp, save_image,
                               save_landmarks, warp_to)

from conftest import smooth_image, synthetic_face
from oracles import brute_force_empty_circles, inside_hull, tiles_hull


def write_lmk(path, rows, K=None, W=64, H=64):
    K = len(rows) if K is None else K
    with open(path, "w") as fh:
        fh.write(f"#K={K} W={W} H={H}\n")
        for r in rows:
            fh.write(r + "\n")


# --- landmark I/O -----------------------------------------------------------


def test_load_landmarks_normalizes(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.uniform(0, 64, (106, 2)) * [1, 0.5]
    write_lmk(tmp_path / "a.txt", [f"{float(x)!r} {float(y)!r}" for x, y in px], W=64, H=32)
    lms = load_landmarks(tmp_path / "a.txt")
    assert lms.K == 106
    np.testing.assert_array_equal(lms.points, px / [64, 32])


def test_landmark_count_mismatch(tmp_path):
    write_lmk(tmp_path / "a.txt", ["1 2"] * 105)
    with pytest.raises(LandmarkParseError, match="landmark count mismatch"):
        load_landmarks(tmp_path / "a.txt", K=106)


def test_nan_row_names_line(tmp_path):
    rows = ["1 2"] * 106
    rows[4] = "0.5 nan"
    write_lmk(tmp_path / "a.txt", rows)
    with pytest.raises(LandmarkParseError, match="line 6"):
        load_landmarks(tmp_path / "a.txt")


@pytest.mark.parametrize("row,msg", [("1 2 3", "expected 2 values"), ("1 x", "not a number"),
                                     ("inf 2", "non-finite")])
def test_malformed_rows(tmp_path, row, msg):
    rows = ["1 2"] * 106
    rows[0] = row
    write_lmk(tmp_path / "a.txt", rows)
    with pytest.raises(LandmarkParseError, match=msg):
        load_landmarks(tmp_path / "a.txt")


def test_missing_header(tmp_path):
    (tmp_path / "a.txt").write_text("1 2\n" * 106)
    with pytest.raises(LandmarkParseError, match="line 1"):
        load_landmarks(tmp_path / "a.txt")


def test_landmark_round_trip(tmp_path):
    lms = LandmarkSet(np.random.default_rng(1).uniform(0, 1, (106, 2)))
    save_landmarks(tmp_path / "a.txt", lms, 64, 48)
    back = load_landmarks(tmp_path / "a.txt")
    np.testing.assert_allclose(back.points, lms.points, rtol=0, atol=1e-15)


def test_landmark_set_invariants():
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        LandmarkSet([[0.1, np.inf]])
    lms = LandmarkSet([[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(ValueError):
        lms.points[0, 0] = 1.0


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (8, 9, 3)) / 255.0
    save_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)
    with pytest.raises(ValueError):
        save_image(tmp_path / "b.png", img + 0.5)


# --- alignment ----------------------------------------------------------------


def canonical_face(S=64):
    """Synthetic face whose anchors sit exactly on the canonical positions."""
    img, lms = synthetic_face(3, 96)
    return align_face(img, lms, AlignmentConfig(output_size=S))


def test_align_canonical_is_identity():
    img, lms = canonical_face()
    out, out_l = align_face(img, lms, AlignmentConfig(output_size=64))
    assert out.shape == (64, 64, 3)
    assert np.abs(out - img).max() <= 2 / 255
    np.testing.assert_allclose(out_l.points, lms.points, atol=1e-12)


def rotate_about_centre(img, lms, deg):
    """Rotate image content and landmarks by ``deg`` about the image centre (bilinear)."""
    from morphkit.geometry import bilinear_sample
    h, w = img.shape[:2]
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    R = np.array([[c, -s], [s, c]])
    centre = np.array([w / 2, h / 2])
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    q = np.stack([xs.ravel(), ys.ravel()], 1) - centre
    src = q @ R + centre  # inverse rotation
    out = bilinear_sample(img, src[:, 0].reshape(h, w) - 0.5, src[:, 1].reshape(h, w) - 0.5)
    px = (lms.to_pixels(w, h) - centre) @ R.T + centre
    return np.clip(out, 0, 1), LandmarkSet.from_pixels(px, w, h)


def test_align_undoes_rotation():
    img, lms = canonical_face(128)
    rot, rot_l = rotate_about_centre(img, lms, 10.0)
    eyes = rot_l.to_pixels(128, 128)[[104, 105]]
    assert abs(eyes[0, 1] - eyes[1, 1]) > 5  # the fixture really is tilted
    out, out_l = align_face(rot, rot_l, AlignmentConfig(output_size=64))
    e = out_l.to_pixels(64, 64)[[104, 105]]
    assert abs(e[0, 1] - e[1, 1]) <= 0.5
    ref, _ = align_face(img, lms, AlignmentConfig(output_size=64))
    assert np.abs(out - ref)[16:48, 16:48].mean() < 0.02


def test_align_output_size_and_landmarks_follow():
    img, lms = synthetic_face(2, 80)
    out, out_l = align_face(img, lms, AlignmentConfig(output_size=40))
    assert out.shape == (40, 40, 3)
    cfg = AlignmentConfig(output_size=40)
    e = out_l.points
    np.testing.assert_allclose(e[104], cfg.left_eye_pos, atol=0.02)
    np.testing.assert_allclose(e[105], cfg.right_eye_pos, atol=0.02)


def test_align_degenerate_anchors():
    img, lms = synthetic_face(1)
    pts = lms.points.copy()
    pts[105] = pts[104]
    with pytest.raises(AlignmentError):
        align_face(img, LandmarkSet(pts), AlignmentConfig(output_size=64))


def test_alignment_config_validation():
    with pytest.raises(ValueError):
        AlignmentConfig(output_size=8).validate()
    with pytest.raises(ValueError):
        AlignmentConfig(left_eye=[200]).validate(106)


# --- Delaunay -------------------------------------------------------------------


def test_three_points_one_triangle():
    mesh = delaunay_triangulate([[0.1, 0.1], [0.9, 0.2], [0.4, 0.8]], augment=False)
    assert mesh.triangles.tolist() == [[0, 1, 2]]


def test_pentagon_three_triangles():
    ang = np.deg2rad(90 + 72 * np.arange(5))
    pts = 0.5 + 0.4 * np.stack([np.cos(ang), np.sin(ang)], 1)
    mesh = delaunay_triangulate(pts, augment=False)
    assert len(mesh.triangles) == 3
    assert brute_force_empty_circles(mesh.vertices, mesh.triangles)


@pytest.mark.parametrize("n", [4, 6, 7, 11])
def test_convex_position_count(n):
    rng = np.random.default_rng(n)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    pts = 0.5 + 0.4 * np.stack([np.cos(ang), 0.7 * np.sin(ang)], 1)
    assert len(delaunay_triangulate(pts, augment=False).triangles) == n - 2


def test_unit_square_tie_break():
    sq = [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert delaunay_triangulate(sq, augment=False).triangles.tolist() == [[0, 1, 3], [0, 2, 3]]
    # same point set, different input order: same geometric fan from the lowest index
    perm = [[1, 1], [0, 0], [1, 0], [0, 1]]
    assert delaunay_triangulate(perm, augment=False).triangles.tolist() == [[0, 1, 2], [0, 1, 3]]


def test_random_sets_empty_circumcircle():
    rng = np.random.default_rng(20)
    for _ in range(100):
        pts = rng.uniform(0.02, 0.98, (20, 2))
        mesh = delaunay_triangulate(pts)
        assert mesh.vertices.shape == (28, 2)
        assert brute_force_empty_circles(mesh.vertices, mesh.triangles)
        assert tiles_hull(mesh.vertices, mesh.triangles)


def test_grid_cocircular_is_valid_and_deterministic():
    g = np.linspace(0.1, 0.9, 5)
    pts = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    m1 = delaunay_triangulate(pts)
    m2 = delaunay_triangulate(pts.copy())
    np.testing.assert_array_equal(m1.triangles, m2.triangles)
    assert brute_force_empty_circles(m1.vertices, m1.triangles)
    assert tiles_hull(m1.vertices, m1.triangles)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_delaunay_properties(seed, n):
    pts = np.random.default_rng(seed).uniform(0, 1, (n, 2))
    mesh = delaunay_triangulate(pts)
    tri = mesh.triangles
    assert np.all(tri[:, 0] < tri[:, 1]) and np.all(tri[:, 1] < tri[:, 2])
    assert tri.tolist() == sorted(tri.tolist())
    assert brute_force_empty_circles(mesh.vertices, tri)
    assert tiles_hull(mesh.vertices, tri)
    # the landmark block keeps its order
    np.testing.assert_array_equal(mesh.vertices[:n], pts)


def test_collinear_rejected():
    pts = np.stack([np.linspace(0, 1, 5), np.linspace(0, 1, 5)], 1)
    with pytest.raises(TriangulationError):
        delaunay_triangulate(pts, augment=False)


# --- warping ------------------------------------------------------------------


def test_identity_warp(face):
    img, lms = face(7)
    out = piecewise_affine_warp(img, lms, lms, delaunay_triangulate(lms))
    mask = inside_hull(lms.to_pixels(64, 64), 64, 64)
    assert np.abs(out - img)[mask].max() <= 1 / 255


def test_identity_warp_whole_image_with_boundary(face):
    img, lms = face(8)
    out = piecewise_affine_warp(img, lms, lms, delaunay_triangulate(lms))
    assert np.abs(out - img).max() <= 1 / 255


def test_translation_warp():
    img = smooth_image(64, 64, 1)
    rng = np.random.default_rng(2)
    src = LandmarkSet(rng.uniform(0.2, 0.6, (30, 2)))
    dst = LandmarkSet(src.points + [5 / 64, 0])
    out = piecewise_affine_warp(img, src, dst, delaunay_triangulate(dst, augment=False))
    mask = inside_hull(dst.to_pixels(64, 64), 64, 64)
    assert mask.sum() > 100
    shifted = np.roll(img, 5, axis=1)
    assert np.abs(out - shifted)[mask].max() <= 2 / 255


def test_scaled_triangle_centroid():
    img = smooth_image(64, 64, 3)
    centroid = np.array([32.5, 30.5])  # a pixel centre
    tri_px = centroid + np.array([[-6.0, -5.0], [7.0, -2.0], [-1.0, 7.0]])
    big_px = centroid + 2 * (tri_px - centroid)
    src = LandmarkSet.from_pixels(tri_px, 64, 64)
    dst = LandmarkSet.from_pixels(big_px, 64, 64)
    out = piecewise_affine_warp(img, src, dst, delaunay_triangulate(dst, augment=False))
    # closed form: the affine map fixes the centroid
    np.testing.assert_allclose(out[30, 32], img[30, 32], atol=1e-12)
    # and a vertex-adjacent interior point maps to the halved offset
    p = centroid + [4.0, 2.0]
    q = centroid + 0.5 * (p - centroid)
    from morphkit.geometry import bilinear_sample
    expect = bilinear_sample(img, np.array(q[0] - 0.5), np.array(q[1] - 0.5))
    np.testing.assert_allclose(out[int(p[1]), int(p[0])], expect, atol=1e-12)


def test_warp_composition_round_trip():
    img = smooth_image(64, 64, 4)
    rng = np.random.default_rng(5)
    base = LandmarkSet(rng.uniform(0.2, 0.8, (40, 2)))
    moved = LandmarkSet(base.points + 0.02 * np.sin(6 * base.points[:, ::-1]))
    there = piecewise_affine_warp(img, base, moved, delaunay_triangulate(moved))
    back = piecewise_affine_warp(there, moved, base, delaunay_triangulate(base))
    mask = inside_hull(base.to_pixels(64, 64), 64, 64, margin=3)
    assert np.abs(back - img)[mask].max() <= 4 / 255


def test_degenerate_triangle_skipped_with_warning():
    img = smooth_image(32, 32, 0)
    dst = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])
    mesh = TriangleMesh(vertices=dst, triangles=np.array([[0, 1, 2], [0, 0, 1]]), n_landmarks=3)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        out = piecewise_affine_warp(img, dst, dst, mesh)
    assert any("degenerate" in str(w.message) for w in rec)
    assert np.abs(out - img).max() <= 1 / 255


def test_warp_bit_identical_across_calls(face):
    img, lms = face(9)
    tgt = LandmarkSet(lms.points + 0.01)
    a = warp_to(img, lms, tgt)
    b = warp_to(img.copy(), lms, tgt)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


# --- blending and classical morph -----------------------------------------------


def test_alpha_blend_examples():
    rng = np.random.default_rng(0)
    A, B = rng.uniform(0, 1, (2, 8, 8, 3))
    np.testing.assert_array_equal(alpha_blend(A, A, 0.5), A)
    np.testing.assert_array_equal(alpha_blend(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), 0.5), np.full((4, 4, 3), 0.5))
    np.testing.assert_array_equal(alpha_blend(A, B, 1.0), A)
    with pytest.raises(ValueError):
        alpha_blend(A, B[:4], 0.5)
    with pytest.raises(ValueError):
        alpha_blend(A, B, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 16), st.integers(0, 16), st.integers(0, 2**32 - 1))
def test_alpha_blend_linear(k1, k2, seed):
    # dyadic inputs keep every product exact
    a1, a2 = k1 / 16, k2 / 16
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (4, 4, 3)) / 256
    b = rng.integers(0, 256, (4, 4, 3)) / 256
    lhs = alpha_blend(a, b, a1) + alpha_blend(a, b, a2)
    np.testing.assert_array_equal(lhs, 2 * alpha_blend(a, b, (a1 + a2) / 2))


def test_classical_morph_identities(face):
    img, lms = face(10)
    out = classical_morph(img, img, lms, lms, lms, 0.5)
    assert np.abs(out - img).max() <= 1 / 255
    img2, lms2 = face(11)
    out = classical_morph(img, img2, lms, lms2, lms, 1.0)
    assert np.abs(out - img).max() <= 1 / 255


def reference_morph(i1, i2, l1, l2, lt, alpha, triangles):
    """Pixel-by-pixel warp + blend, written independently of the library path."""
    h, w = i1.shape[:2]
    corners = np.array([[0, 0], [.5, 0], [1, 0], [1, .5], [1, 1], [.5, 1], [0, 1], [0, .5]])

    def verts(lm):
        return np.vstack([lm.points, corners]) * [w, h]

    def sample(img, x, y):
        x -= 0.5
        y -= 0.5
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        acc = np.zeros(3)
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy = min(max(y0 + dy, 0), h - 1)
                xx = min(max(x0 + dx, 0), w - 1)
                acc += wy * wx * img[yy, xx]
        return acc

    vt, v1, v2 = verts(lt), verts(l1), verts(l2)
    out = np.zeros_like(i1)
    for r in range(h):
        for c in range(w):
            p = np.array([c + 0.5, r + 0.5])
            for t in triangles:
                a, b, cc = vt[t]
                M = np.array([[b[0] - a[0], cc[0] - a[0]], [b[1] - a[1], cc[1] - a[1]]])
                u, v = np.linalg.solve(M, p - a)
                if u >= -1e-9 and v >= -1e-9 and u + v <= 1 + 1e-9:
                    s1 = v1[t[0]] + u * (v1[t[1]] - v1[t[0]]) + v * (v1[t[2]] - v1[t[0]])
                    s2 = v2[t[0]] + u * (v2[t[1]] - v2[t[0]]) + v * (v2[t[2]] - v2[t[0]])
                    px1 = sample(i1, *s1)
                    px2 = sample(i2, *s2)
                    out[r, c] = alpha * px1 + (1 - alpha) * px2
                    break
    return np.clip(out, 0, 1)


def test_classical_morph_matches_reference():
    i1, l1 = synthetic_face(21, 24)
    i2, l2 = synthetic_face(22, 24)
    lt = average_landmarks(l1, l2, 0.5)
    got = classical_morph(i1, i2, l1, l2, lt, 0.5)
    ref = reference_morph(i1, i2, l1, l2, lt, 0.5, delaunay_triangulate(lt).triangles)
    np.testing.assert_allclose(got, ref, atol=1e-9)
    np.testing.assert_array_equal(np.rint(got * 255), np.rint(ref * 255))


def test_classical_morph_rejects_mismatch(face):
    img, lms = face(1)
    with pytest.raises(ValueError):
        classical_morph(img, img[:32], lms, lms, lms)
    with pytest.raises(ValueError):
        classical_morph(img, img, lms, LandmarkSet(lms.points[:10]), lms)
