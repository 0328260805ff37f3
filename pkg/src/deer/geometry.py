"""Polygon post-processing: binarisation, regions, contours, offsetting and reference points.

Coordinates are image pixels with pixel ``(x, y)`` covering ``[x, x+1] x [y, y+1]``
(y grows downwards). A polygon is stored with positive shoelace area, which for
a quadrilateral annotated top-left, top-right, bottom-right, bottom-left keeps
the annotation order.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import ndimage
from shapely import geometry as sg
from shapely import ops as so

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DegenerateRegionError(ValueError):
    """A region has no usable polygon (too small, collapsed, zero length)."""


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class Polygon:
    """Closed vertex ring with positive signed area."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        pts = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise DegenerateRegionError(f"polygon needs at least 3 vertices, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateRegionError("polygon has non-finite vertices")
        if signed_area(pts) < 0:
            # reverse while keeping the first vertex first
            pts = np.concatenate([pts[:1], pts[:0:-1]], axis=0)
        self.vertices = pts

    def __len__(self) -> int:
        return len(self.vertices)

    def __repr__(self) -> str:
        return f"Polygon({self.vertices.round(3).tolist()})"

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def perimeter(self) -> float:
        d = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def bounds(self) -> tuple[float, float, float, float]:
        (x0, y0), (x1, y1) = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)

    def translated(self, v) -> "Polygon":
        return Polygon(self.vertices + np.asarray(v, dtype=np.float64))

    def scaled(self, sx: float, sy: float | None = None) -> "Polygon":
        sy = sx if sy is None else sy
        return Polygon(self.vertices * np.array([sx, sy]))

    def transformed(self, matrix: np.ndarray) -> "Polygon":
        """Apply a 2x3 affine map."""
        m = np.asarray(matrix, dtype=np.float64)
        return Polygon(self.vertices @ m[:, :2].T + m[:, 2])

    def to_flat(self) -> list[float]:
        return [float(v) for v in self.vertices.reshape(-1)]

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> "Polygon":
        if len(coords) % 2:
            raise ValueError("odd number of polygon coordinates")
        return cls(np.asarray(coords, dtype=np.float64).reshape(-1, 2))

    def is_simple(self) -> bool:
        return sg.LinearRing(self.vertices).is_simple


# ----------------------------------------------------------------------------
# maps to regions


def binarize(probability: np.ndarray, t: float) -> np.ndarray:
    return np.asarray(probability) > t


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components as ``(n, 2)`` arrays of ``(y, x)``.

    Ordered by the smallest row, then the smallest column, of each component.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    comps = [np.stack([y, x], axis=1) for y, x in zip(np.split(ys, splits), np.split(xs, splits))]
    comps.sort(key=lambda c: (int(c[:, 0].min()), int(c[:, 1].min())))
    return comps


def _bridge_diagonals(mask: np.ndarray) -> np.ndarray:
    """Fill one pixel of every 2x2 window whose set pixels touch only diagonally."""
    m = mask.copy()
    for _ in range(m.size):
        a, b = m[:-1, :-1], m[:-1, 1:]
        c, d = m[1:, :-1], m[1:, 1:]
        diag = a & d & ~b & ~c
        anti = b & c & ~a & ~d
        if not (diag.any() or anti.any()):
            break
        ys, xs = np.nonzero(diag)
        m[ys, xs + 1] = True
        ys, xs = np.nonzero(anti)
        m[ys, xs] = True
    return m


def _remove_collinear(pts: np.ndarray) -> np.ndarray:
    changed = True
    while changed and len(pts) > 3:
        prev = np.roll(pts, 1, axis=0)
        nxt = np.roll(pts, -1, axis=0)
        cross = (pts[:, 0] - prev[:, 0]) * (nxt[:, 1] - pts[:, 1]) - (pts[:, 1] - prev[:, 1]) * (nxt[:, 0] - pts[:, 0])
        keep = np.abs(cross) > 1e-12
        changed = not keep.all()
        if keep.sum() < 3:
            break
        pts = pts[keep]
    return pts


def component_to_polygon(component: np.ndarray, min_pixels: int = 4) -> Polygon:
    """Outer pixel-edge contour of a region, collinear vertices removed.

    Diagonal-only contacts are bridged and holes filled first so the contour is
    a single simple ring. Regions smaller than ``min_pixels`` are rejected.
    """
    comp = np.asarray(component, dtype=np.int64).reshape(-1, 2)
    if len(comp) < max(min_pixels, 1):
        raise DegenerateRegionError(f"region of {len(comp)} pixels is below the minimum of {min_pixels}")
    y0, x0 = comp.min(axis=0)
    h, w = comp.max(axis=0) - (y0, x0) + 1
    mask = np.zeros((h + 2, w + 2), dtype=bool)
    mask[comp[:, 0] - y0 + 1, comp[:, 1] - x0 + 1] = True
    mask = ndimage.binary_fill_holes(_bridge_diagonals(mask))
    # keep the component that holds the first pixel (bridging cannot split, but be safe)
    labels, _ = ndimage.label(mask)
    mask = labels == labels[comp[0, 0] - y0 + 1, comp[0, 1] - x0 + 1]

    edges: dict[tuple[int, int], tuple[int, int]] = {}
    ys, xs = np.nonzero(mask)
    for dy, dx, a, b in ((-1, 0, (0, 0), (1, 0)), (0, 1, (1, 0), (1, 1)),
                         (1, 0, (1, 1), (0, 1)), (0, -1, (0, 1), (0, 0))):
        sel = ~mask[ys + dy, xs + dx]
        for y, x in zip(ys[sel], xs[sel]):
            edges[(x + a[0], y + a[1])] = (x + b[0], y + b[1])
    start = min(edges)
    ring = [start]
    cur = edges.pop(start)
    while cur != start:
        ring.append(cur)
        cur = edges.pop(cur)
    pts = np.asarray(ring, dtype=np.float64) + (x0 - 1, y0 - 1)
    pts = _remove_collinear(pts)
    if len(pts) < 3 or signed_area(pts) <= 0:
        raise DegenerateRegionError("region has no valid contour")
    return Polygon(pts)


# ----------------------------------------------------------------------------
# offsetting


def dilation_offset(poly: Polygon, r: float) -> float:
    """Offset distance ``area * r / perimeter``."""
    length = poly.perimeter
    if length <= 0:
        raise DegenerateRegionError("polygon has zero perimeter")
    return max(poly.area, 0.0) * r / length


def shrink_offset(poly: Polygon, shrink_ratio: float) -> float:
    """Label-shrinking distance ``area * (1 - r^2) / perimeter``."""
    return dilation_offset(poly, 1.0 - shrink_ratio ** 2)


def _winding_number(pt: np.ndarray, ring: np.ndarray) -> int:
    x, y = pt
    a = ring
    b = np.roll(ring, -1, axis=0)
    is_left = (b[:, 0] - a[:, 0]) * (y - a[:, 1]) - (x - a[:, 0]) * (b[:, 1] - a[:, 1])
    up = (a[:, 1] <= y) & (b[:, 1] > y) & (is_left > 0)
    down = (a[:, 1] > y) & (b[:, 1] <= y) & (is_left < 0)
    return int(up.sum() - down.sum())


def _positive_fill(ring: np.ndarray) -> np.ndarray | None:
    """Outer ring of the region with positive winding number of a self-touching ring."""
    closed = np.vstack([ring, ring[:1]])
    faces = list(so.polygonize(so.unary_union(sg.LineString(closed))))
    keep = []
    for face in faces:
        if face.area <= 1e-12:
            continue
        p = face.representative_point()
        if _winding_number(np.array([p.x, p.y]), ring) > 0:
            keep.append(face)
    if not keep:
        return None
    merged = so.unary_union(keep)
    if merged.geom_type == "MultiPolygon":
        merged = max(merged.geoms, key=lambda g: g.area)
    return np.asarray(merged.exterior.coords)[:-1]


def _buffer_fallback(pts: np.ndarray, d: float, miter_limit: float) -> Polygon:
    shape = sg.Polygon(pts).buffer(d, join_style="mitre", mitre_limit=miter_limit)
    if shape.is_empty or shape.area <= 0:
        raise DegenerateRegionError(f"offset {d} collapses the polygon")
    if shape.geom_type == "MultiPolygon":
        shape = max(shape.geoms, key=lambda g: g.area)
    return Polygon(_remove_collinear(np.asarray(shape.exterior.coords)[:-1]))


def offset_polygon(poly: Polygon, d: float, miter_limit: float = 2.0) -> Polygon:
    """Move every edge ``d`` along its outward normal (inward for ``d < 0``).

    Corners are mitred while the mitre stays within ``miter_limit * |d|``,
    otherwise bevelled; overlapping parts are resolved by the positive fill rule.
    """
    pts = _remove_collinear(poly.vertices)
    if d == 0:
        return Polygon(pts)
    nxt = np.roll(pts, -1, axis=0)
    e = nxt - pts
    lens = np.hypot(e[:, 0], e[:, 1])
    if np.any(lens == 0):
        keep = lens > 0
        pts = pts[keep]
        if len(pts) < 3:
            raise DegenerateRegionError("polygon collapses to fewer than 3 vertices")
        return offset_polygon(Polygon(pts), d, miter_limit)
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1) / lens[:, None]
    out = []
    n = len(pts)
    for i in range(n):
        n1, n2 = normals[i - 1], normals[i]
        v = pts[i]
        cos = float(np.clip(n1 @ n2, -1.0, 1.0))
        turn = (pts[i, 0] - pts[i - 1, 0]) * (nxt[i, 1] - pts[i, 1]) - (pts[i, 1] - pts[i - 1, 1]) * (nxt[i, 0] - pts[i, 0])
        convex = (turn > 0) == (d > 0)
        ratio = math.sqrt(2.0 / (1.0 + cos)) if cos > -1 + 1e-12 else math.inf
        if ratio <= miter_limit:
            out.append(v + d * (n1 + n2) / (1.0 + cos))
        elif convex:
            out.append(v + d * n1)
            out.append(v + d * n2)
        else:
            out.extend([v + d * n1, v, v + d * n2])
    raw = np.asarray(out)
    if d < 0 and len(raw) == n:
        # an inward offset that flips an edge has swallowed it: fall back to exact clipping
        new_e = np.roll(raw, -1, axis=0) - raw
        if np.any((new_e * e).sum(axis=1) <= 0):
            return _buffer_fallback(pts, d, miter_limit)
    if len(raw) >= 3 and signed_area(raw) > 0 and sg.LinearRing(raw).is_simple:
        return Polygon(_remove_collinear(raw))
    if len(raw) < 3 or signed_area(raw) <= 0 and d < 0:
        raise DegenerateRegionError(f"offset {d} collapses the polygon")
    ring = _positive_fill(raw)
    if ring is None or len(ring) < 3 or signed_area(ring) == 0:
        raise DegenerateRegionError(f"offset {d} collapses the polygon")
    res = Polygon(_remove_collinear(ring))
    if res.area <= 0:
        raise DegenerateRegionError(f"offset {d} collapses the polygon")
    return res


# ----------------------------------------------------------------------------
# reference points


def centroid(poly: Polygon, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Area-weighted centroid ``(x, y)``; divided by ``(W, H)`` when ``image_size=(H, W)`` is given."""
    p = poly.vertices
    q = np.roll(p, -1, axis=0)
    cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    a = cross.sum() / 2
    if abs(a) < 1e-12:
        c = p.mean(axis=0)
    else:
        c = np.array([((p[:, 0] + q[:, 0]) * cross).sum(), ((p[:, 1] + q[:, 1]) * cross).sum()]) / (6 * a)
    if image_size is not None:
        c = c / np.array([image_size[1], image_size[0]], dtype=np.float64)
    return c


def convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain hull with positive orientation."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def min_area_rect(pts: np.ndarray) -> np.ndarray:
    """Corners of the minimum-area enclosing rectangle, positively oriented."""
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise DegenerateRegionError("points do not span an area")
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        u = e / np.hypot(*e)
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, u0, u1, v0, v1 = best
    rect = np.array([u0 * u + v0 * v, u1 * u + v0 * v, u1 * u + v1 * v, u0 * u + v1 * v])
    return Polygon(rect).vertices


def reference_corners(poly: Polygon) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-left corner and its top-right / bottom-left neighbours.

    Quadrilaterals use vertex order; other polygons use the minimum-area
    rectangle corner nearest the first vertex.
    """
    if len(poly) == 4:
        v = poly.vertices
        return v[0], v[1], v[3]
    rect = min_area_rect(poly.vertices)
    i = int(np.argmin(np.hypot(*(rect - poly.vertices[0]).T)))
    return rect[i], rect[(i + 1) % 4], rect[(i - 1) % 4]


def perturbation_scale(poly: Polygon) -> float:
    tl, tr, bl = reference_corners(poly)
    s = min(float(np.hypot(*(tl - tr))), float(np.hypot(*(tl - bl))))
    if s <= 0:
        raise DegenerateRegionError("polygon has a zero-length side")
    return s


def perturb_reference(poly: Polygon, rng: np.random.Generator | None = None,
                      eta: tuple[float, float] | None = None) -> np.ndarray:
    """Centroid jittered by ``eta * s / 2`` per coordinate, ``eta ~ U(-1, 1)``.

    ``s`` is the shorter of the two sides meeting at the top-left corner.
    """
    s = perturbation_scale(poly)
    if eta is None:
        eta = rng.uniform(-1.0, 1.0, size=2)
    return centroid(poly) + np.asarray(eta, dtype=np.float64) * s / 2


def shift_reference(p_ref, p_tl, beta: float) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return (1 - beta) * np.asarray(p_ref, dtype=np.float64) + beta * np.asarray(p_tl, dtype=np.float64)


def point_in_polygon(pt, poly: Polygon) -> bool:
    return bool(points_in_polygon(np.asarray(pt, dtype=np.float64).reshape(1, 2), poly)[0])


def points_in_polygon(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    """Even-odd test for many points at once."""
    x, y = pts[:, 0:1], pts[:, 1:2]
    a = poly.vertices[None, :, :]
    b = np.roll(poly.vertices, -1, axis=0)[None, :, :]
    ay, by = a[..., 1], b[..., 1]
    straddle = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = a[..., 0] + (y - ay) * (b[..., 0] - a[..., 0]) / (by - ay)
    hits = straddle & (x < xcross)
    return (hits.sum(axis=1) % 2) == 1


def inner_reference(poly: Polygon, mode: str, rng: np.random.Generator | None = None,
                    max_tries: int = 1000) -> np.ndarray:
    """Interior point: uniform sample (``train``) or centre of the vertical cross-section (``infer``)."""
    x0, y0, x1, y1 = poly.bounds()
    if mode == "train":
        for _ in range(max_tries):
            p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            if point_in_polygon(p, poly):
                return p
        return centroid(poly)
    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    cx = (x0 + x1) / 2
    v = poly.vertices
    w = np.roll(v, -1, axis=0)
    cross = ((v[:, 0] <= cx) & (w[:, 0] > cx)) | ((w[:, 0] <= cx) & (v[:, 0] > cx))
    a, b = v[cross], w[cross]
    ys = np.sort(a[:, 1] + (cx - a[:, 0]) * (b[:, 1] - a[:, 1]) / (b[:, 0] - a[:, 0]))
    best = None
    for lo, hi in zip(ys[0::2], ys[1::2]):
        if best is None or hi - lo > best[0]:
            best = (hi - lo, np.array([cx, (lo + hi) / 2]))
    return best[1] if best is not None else centroid(poly)


# ----------------------------------------------------------------------------
# overlap and rasterisation


def rasterize(poly: Polygon, shape: tuple[int, int]) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels whose centre lies inside the polygon."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = poly.bounds()
    c0, c1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)), w)
    r0, r1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)), h)
    if c1 <= c0 or r1 <= r0:
        return mask
    yy, xx = np.mgrid[r0:r1, c0:c1]
    pts = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    mask[r0:r1, c0:c1] = points_in_polygon(pts, poly).reshape(r1 - r0, c1 - c0)
    return mask


def polygon_iou(a: Polygon, b: Polygon, raster_scale: float = 4.0) -> float:
    """IoU of the two polygons sampled on a grid of ``raster_scale`` cells per pixel."""
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return 0.0
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    x1, y1 = max(ax1, bx1), max(ay1, by1)
    nx = max(int(math.ceil((x1 - x0) * raster_scale)), 1)
    ny = max(int(math.ceil((y1 - y0) * raster_scale)), 1)
    xs = x0 + (np.arange(nx) + 0.5) / raster_scale
    ys = y0 + (np.arange(ny) + 0.5) / raster_scale
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    ina = points_in_polygon(pts, a)
    inb = points_in_polygon(pts, b)
    union = np.count_nonzero(ina | inb)
    return float(np.count_nonzero(ina & inb) / union) if union else 0.0


def edge_distance(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    """Distance from each point to the nearest polygon edge."""
    a = poly.vertices[None]
    b = np.roll(poly.vertices, -1, axis=0)[None]
    p = np.asarray(pts, dtype=np.float64)[:, None, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def detect_polygons(probability: np.ndarray, threshold: float = 0.3, dilation: float = 1.5,
                    min_area: int = 4, min_score: float = 0.5) -> list[tuple[Polygon, float]]:
    """Probability map to dilated region polygons with their mean-probability score."""
    out = []
    for comp in connected_components(binarize(probability, threshold)):
        if len(comp) < min_area:
            continue
        score = float(probability[comp[:, 0], comp[:, 1]].mean())
        if score < min_score:
            continue
        try:
            poly = component_to_polygon(comp, min_pixels=min_area)
            poly = offset_polygon(poly, dilation_offset(poly, dilation))
        except DegenerateRegionError:
            continue
        out.append((poly, score))
    return out

