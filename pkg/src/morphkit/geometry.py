"""Landmark I/O, face alignment, Delaunay meshing and piecewise-affine warping.

Coordinate conventions
----------------------
Landmarks are stored normalized to ``[0, 1]`` relative to image width/height.
Pixel ``(col, row)`` covers the continuous square ``[col, col+1) x [row, row+1)``,
so its centre sits at normalized ``((col + 0.5) / W, (row + 0.5) / H)``. Landmark
files hold continuous pixel coordinates; loading divides by the declared ``W``/``H``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.spatial import Delaunay, QhullError

logger = logging.getLogger(__name__)

DEFAULT_K = 106
AREA_EPS = 1e-12

# 4 corners + 4 edge midpoints of the unit square, appended after the K landmarks.
BOUNDARY_POINTS = np.array(
    [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 0.5],
     [1.0, 1.0], [0.5, 1.0], [0.0, 1.0], [0.0, 0.5]]
)


class LandmarkParseError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class TriangulationError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered ``(K, 2)`` array of normalized ``(x, y)`` landmark coordinates."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValueError(f"landmarks must have shape (K, 2) with K > 0, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.K

    def to_pixels(self, width: int, height: int) -> np.ndarray:
        return self.points * np.array([width, height], dtype=np.float64)

    @classmethod
    def from_pixels(cls, pixels, width: int, height: int) -> "LandmarkSet":
        return cls(np.asarray(pixels, dtype=np.float64) / np.array([width, height], dtype=np.float64))


def as_points(landmarks) -> np.ndarray:
    if isinstance(landmarks, LandmarkSet):
        return landmarks.points
    return np.asarray(landmarks, dtype=np.float64)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangulated vertex set.

    ``vertices`` holds normalized coordinates; indices ``>= n_landmarks`` are the
    synthetic boundary points. ``triangles`` is an ``(M, 3)`` index array.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    n_landmarks: int

    @property
    def augmented(self) -> bool:
        return self.vertices.shape[0] == self.n_landmarks + len(BOUNDARY_POINTS)

    def vertices_for(self, landmarks) -> np.ndarray:
        """Vertex array for another landmark set sharing this mesh topology."""
        pts = as_points(landmarks)
        if pts.shape[0] != self.n_landmarks:
            raise ValueError(f"mesh built for K={self.n_landmarks}, got K={pts.shape[0]}")
        if self.augmented:
            return np.vstack([pts, BOUNDARY_POINTS])
        return pts


@dataclass
class AlignmentConfig:
    output_size: int = 256
    left_eye: list[int] = field(default_factory=lambda: [104])
    right_eye: list[int] = field(default_factory=lambda: [105])
    mouth: list[int] = field(default_factory=lambda: list(range(84, 96)))
    # canonical normalized anchor positions in the output crop
    left_eye_pos: tuple[float, float] = (0.35, 0.40)
    right_eye_pos: tuple[float, float] = (0.65, 0.40)
    mouth_pos: tuple[float, float] = (0.50, 0.72)
    padding: str = "edge"

    def validate(self, K: int | None = None):
        if self.output_size < 16:
            raise ValueError("output_size must be >= 16")
        if self.padding not in ("edge", "constant"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        for name in ("left_eye", "right_eye", "mouth"):
            idx = getattr(self, name)
            if not idx:
                raise ValueError(f"{name} anchor needs at least one landmark index")
            if K is not None and max(idx) >= K:
                raise ValueError(f"{name} anchor index {max(idx)} out of range for K={K}")


# ---------------------------------------------------------------------------
# I/O


def load_landmarks(path, K: int | None = DEFAULT_K) -> LandmarkSet:
    """Read a landmark file (``#K=<int> W=<int> H=<int>`` header, then ``x y`` rows)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise LandmarkParseError(f"{path}: line 1: missing '#K=<int> W=<int> H=<int>' header")
    header = {}
    for tok in lines[0][1:].split():
        key, _, val = tok.partition("=")
        try:
            header[key] = int(val)
        except ValueError:
            raise LandmarkParseError(f"{path}: line 1: bad header field {tok!r}") from None
    if not {"K", "W", "H"} <= header.keys():
        raise LandmarkParseError(f"{path}: line 1: header must declare K, W and H")
    if header["W"] <= 0 or header["H"] <= 0:
        raise LandmarkParseError(f"{path}: line 1: image dims must be positive")

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LandmarkParseError(f"{path}: line {lineno}: expected 2 values, got {len(parts)}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise LandmarkParseError(f"{path}: line {lineno}: not a number: {line!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LandmarkParseError(f"{path}: line {lineno}: non-finite value: {line!r}")
        rows.append((x, y))

    if len(rows) != header["K"] or (K is not None and len(rows) != K):
        expected = header["K"] if K is None else K
        raise LandmarkParseError(
            f"{path}: landmark count mismatch: expected {expected}, header K={header['K']}, found {len(rows)} rows"
        )
    return LandmarkSet.from_pixels(rows, header["W"], header["H"])


def save_landmarks(path, landmarks: LandmarkSet, width: int, height: int):
    px = landmarks.to_pixels(width, height)
    with open(path, "w") as fh:
        fh.write(f"#K={landmarks.K} W={width} H={height}\n")
        for x, y in px:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return img


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray):
    img = check_image(image)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Sampling helpers


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray, padding: str = "edge") -> np.ndarray:
    """Sample ``image`` at continuous index-space positions (pixel centres at integers)."""
    h, w = image.shape[:2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def fetch(yy, xx):
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        if padding == "constant":
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = np.where(inside[..., None], vals, 0.0)
        return vals

    top = fetch(y0, x0) * (1 - fx) + fetch(y0, x1) * fx
    bottom = fetch(y1, x0) * (1 - fx) + fetch(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def _pixel_centres(width: int, height: int):
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return xs, ys


# ---------------------------------------------------------------------------
# Alignment


def _anchor(points: np.ndarray, idx: Sequence[int]) -> np.ndarray:
    return points[list(idx)].mean(axis=0)


def similarity_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rotation+scale+translation mapping ``src`` rows onto ``dst`` rows.

    Returns a 2x3 matrix ``M`` with ``dst ~= src @ M[:, :2].T + M[:, 2]``.
    """
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    s = src - mu_s
    d = dst - mu_d
    var = (s ** 2).sum()
    if var < 1e-18:
        raise AlignmentError("degenerate anchors: all anchor points coincide")
    # complex-number form of a 2-D similarity: d = z * s
    a = ((s * d).sum()) / var
    b = ((s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]).sum()) / var
    R = np.array([[a, -b], [b, a]])
    t = mu_d - R @ mu_s
    return np.hstack([R, t[:, None]])


def align_face(image: np.ndarray, landmarks: LandmarkSet, cfg: AlignmentConfig):
    """Crop ``image`` to a canonical ``output_size`` square using eye/mouth anchors.

    Returns the aligned image and the landmarks transformed and renormalized to the crop.
    """
    img = check_image(image)
    cfg.validate(landmarks.K)
    h, w = img.shape[:2]
    px = landmarks.to_pixels(w, h)
    le, re_, mo = _anchor(px, cfg.left_eye), _anchor(px, cfg.right_eye), _anchor(px, cfg.mouth)
    if np.linalg.norm(le - re_) < 1e-6:
        raise AlignmentError("degenerate anchors: eye centres coincide")

    S = cfg.output_size
    src = np.stack([le, re_, mo])
    dst = np.array([cfg.left_eye_pos, cfg.right_eye_pos, cfg.mouth_pos]) * S
    M = similarity_transform(src, dst)
    R, t = M[:, :2], M[:, 2]
    Rinv = np.linalg.inv(R)

    xs, ys = _pixel_centres(S, S)
    out_pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src_pts = (out_pts - t) @ Rinv.T
    sx = src_pts[:, 0].reshape(S, S) - 0.5
    sy = src_pts[:, 1].reshape(S, S) - 0.5
    out = np.clip(bilinear_sample(img, sx, sy, cfg.padding), 0.0, 1.0)

    new_px = px @ R.T + t
    return out, LandmarkSet.from_pixels(new_px, S, S)


# ---------------------------------------------------------------------------
# Delaunay triangulation


def _circumcircle(p: np.ndarray):
    (ax, ay), (bx, by), (cx, cy) = p
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-300:
        return None, math.inf
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    centre = np.array([ux, uy])
    return centre, float(np.linalg.norm(p[0] - centre))


def triangle_area(p: np.ndarray) -> float:
    (ax, ay), (bx, by), (cx, cy) = p
    return 0.5 * abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))


def delaunay_triangulate(landmarks, augment: bool = True, cocircular_tol: float = 1e-9) -> TriangleMesh:
    """Delaunay mesh of the landmarks (plus the 8 unit-square boundary points).

    Cocircular groups (where several triangulations are equally Delaunay) are
    re-triangulated as a fan from their lowest vertex index, so the output does
    not depend on Qhull's internal choice. Triangles are emitted as ascending
    index triples in lexicographic order.
    """
    pts = as_points(landmarks)
    K = pts.shape[0]
    verts = np.vstack([pts, BOUNDARY_POINTS]) if augment else pts.copy()
    if verts.shape[0] < 3:
        raise TriangulationError("need at least 3 points to triangulate")
    try:
        tri = Delaunay(verts)
    except QhullError as exc:
        raise TriangulationError(f"triangulation failed (collinear or degenerate points): {exc}") from None

    simplices = tri.simplices
    n = len(simplices)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    circles = [_circumcircle(verts[s]) for s in simplices]
    for i in range(n):
        centre, r = circles[i]
        if centre is None:
            continue
        for j in tri.neighbors[i]:
            if j < 0 or j < i:
                continue
            opposite = [v for v in simplices[j] if v not in simplices[i]][0]
            if abs(np.linalg.norm(verts[opposite] - centre) - r) <= cocircular_tol * max(r, 1.0):
                parent[find(j)] = find(i)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    out = []
    for members in groups.values():
        if len(members) == 1:
            s = simplices[members[0]]
            if triangle_area(verts[s]) > AREA_EPS:
                out.append(tuple(sorted(int(v) for v in s)))
            continue
        vids = sorted({int(v) for m in members for v in simplices[m]})
        centre = verts[vids].mean(axis=0)
        ang = {v: math.atan2(verts[v, 1] - centre[1], verts[v, 0] - centre[0]) for v in vids}
        ring = sorted(vids, key=lambda v: ang[v])
        start = ring.index(min(vids))
        ring = ring[start:] + ring[:start]
        for a, b in zip(ring[1:-1], ring[2:]):
            t = (ring[0], a, b)
            if triangle_area(verts[list(t)]) > AREA_EPS:
                out.append(tuple(sorted(t)))

    if not out:
        raise TriangulationError("all points are collinear")
    triangles = np.array(sorted(out), dtype=np.int64)
    return TriangleMesh(vertices=verts, triangles=triangles, n_landmarks=K)


# ---------------------------------------------------------------------------
# Warping and blending


def affine_from_triangles(src_tri: np.ndarray, dst_tri: np.ndarray) -> np.ndarray:
    """2x3 matrix ``A`` with ``A @ [x, y, 1] = src`` for each ``dst`` vertex."""
    D = np.hstack([dst_tri, np.ones((3, 1))])
    return np.linalg.solve(D, src_tri).T


def piecewise_affine_warp(image: np.ndarray, src, dst, mesh: TriangleMesh) -> np.ndarray:
    """Warp ``image`` so that landmarks at ``src`` move to ``dst``.

    ``mesh`` must be triangulated in ``dst`` space. Each output pixel is pulled
    from the source through the inverse affine map of its containing triangle;
    pixels outside every triangle keep their source value.
    """
    img = check_image(image)
    h, w = img.shape[:2]
    scale = np.array([w, h], dtype=np.float64)
    src_v = mesh.vertices_for(src) * scale
    dst_v = mesh.vertices_for(dst) * scale
    if src_v.shape != dst_v.shape:
        raise ValueError("src and dst landmark counts differ")

    out = img.copy()
    done = np.zeros((h, w), dtype=bool)
    for tri in mesh.triangles:
        d = dst_v[tri]
        s = src_v[tri]
        area = triangle_area(d)
        if area < AREA_EPS * w * h:
            warnings.warn(f"skipping degenerate triangle {tuple(tri)} (area {area:.3g} px^2)")
            continue
        # pixel centres whose (col+0.5, row+0.5) could fall inside the triangle
        c0 = max(int(math.floor(d[:, 0].min() - 0.5)), 0)
        c1 = min(int(math.ceil(d[:, 0].max() - 0.5)), w - 1)
        r0 = max(int(math.floor(d[:, 1].min() - 0.5)), 0)
        r1 = min(int(math.ceil(d[:, 1].max() - 0.5)), h - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        px = cols + 0.5
        py = rows + 0.5

        T = np.array([[d[1, 0] - d[0, 0], d[2, 0] - d[0, 0]],
                      [d[1, 1] - d[0, 1], d[2, 1] - d[0, 1]]])
        Tinv = np.linalg.inv(T)
        dx = px - d[0, 0]
        dy = py - d[0, 1]
        l1 = Tinv[0, 0] * dx + Tinv[0, 1] * dy
        l2 = Tinv[1, 0] * dx + Tinv[1, 1] * dy
        eps = 1e-9
        inside = (l1 >= -eps) & (l2 >= -eps) & (l1 + l2 <= 1 + eps)
        inside &= ~done[rows, cols]
        if not inside.any():
            continue
        A = affine_from_triangles(s, d)
        qx, qy = px[inside], py[inside]
        sx = A[0, 0] * qx + A[0, 1] * qy + A[0, 2]
        sy = A[1, 0] * qx + A[1, 1] * qy + A[1, 2]
        rr, cc = rows[inside], cols[inside]
        out[rr, cc] = bilinear_sample(img, sx - 0.5, sy - 0.5)
        done[rr, cc] = True
    return np.clip(out, 0.0, 1.0)


def alpha_blend(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return np.clip(alpha * a + (1.0 - alpha) * b, 0.0, 1.0)


def average_landmarks(l1: LandmarkSet, l2: LandmarkSet, alpha: float = 0.5) -> LandmarkSet:
    return LandmarkSet(alpha * l1.points + (1.0 - alpha) * l2.points)


def warp_to(image: np.ndarray, src: LandmarkSet, target: LandmarkSet) -> np.ndarray:
    """Classical single-image warp onto ``target`` (mesh built on the target)."""
    return piecewise_affine_warp(image, src, target, delaunay_triangulate(target))


def classical_morph(i1, i2, l1: LandmarkSet, l2: LandmarkSet, l_target: LandmarkSet, alpha: float = 0.5):
    """Delaunay warp of both faces onto ``l_target`` followed by alpha blending."""
    if not (l1.K == l2.K == l_target.K):
        raise ValueError("landmark sets must share K")
    if np.shape(i1) != np.shape(i2):
        raise ValueError("images must share dims")
    mesh = delaunay_triangulate(l_target)
    w1 = piecewise_affine_warp(i1, l1, l_target, mesh)
    w2 = piecewise_affine_warp(i2, l2, l_target, mesh)
    return alpha_blend(w1, w2, alpha)
