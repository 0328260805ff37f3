"""Synthetic scene-text samples, detection targets and augmentation."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from shapely import geometry as sg

from .font import GLYPH_H, GLYPH_W, GAP, word_bitmap
from .geometry import (
    DegenerateRegionError,
    Polygon,
    edge_distance,
    offset_polygon,
    points_in_polygon,
    rasterize,
    shrink_offset,
)
from .model import DEFAULT_CHARSET

IGNORE_TEXT = "###"
T_MIN, T_MAX = 0.3, 0.7


@dataclass
class TextInstance:
    polygon: Polygon
    transcription: str
    ignore: bool = False

    def __post_init__(self):
        if not self.transcription and not self.ignore:
            raise ValueError("a scored instance needs a transcription")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    instances: list[TextInstance]
    prob_target: np.ndarray
    prob_mask: np.ndarray
    thresh_target: np.ndarray
    thresh_mask: np.ndarray
    ink: np.ndarray | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class DatasetConfig:
    image_size: tuple[int, int] = (128, 128)
    min_words: int = 1
    max_words: int = 3
    min_len: int = 1
    max_len: int = 5
    charset: str = DEFAULT_CHARSET
    rotation: float = 15.0  # degrees, symmetric
    scale_range: tuple[float, float] = (1.6, 2.6)  # pixels per font unit
    noise: float = 0.03
    shrink_ratio: float = 0.4
    margin: float = 2.0


@dataclass
class AugmentConfig:
    rotation: float = 90.0
    resize_range: tuple[float, float] = (0.5, 3.0)
    crop_size: int = 128
    jitter_prob: float = 0.8
    jitter: float = 0.3


@dataclass
class AugmentParams:
    angle: float
    scale: float
    crop_xy: tuple[int, int] | None
    jitter: tuple[float, float, float] | None


# ----------------------------------------------------------------------------
# rendering


def _render_word(word: str, angle: float, scale: float, center, shape, supersample: int = 3):
    """Coverage map of a rotated word and its tight quadrilateral."""
    bmp = word_bitmap(word)
    fw, fh = bmp.shape[1], GLYPH_H
    c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    rot = np.array([[c, -s], [s, c]])
    half = np.array([fw, fh]) / 2.0
    corners_f = np.array([[0, 0], [fw, 0], [fw, fh], [0, fh]], dtype=np.float64)
    quad = (corners_f - half) * scale @ rot.T + np.asarray(center)
    h, w = shape
    x0, y0 = np.floor(quad.min(axis=0)).astype(int)
    x1, y1 = np.ceil(quad.max(axis=0)).astype(int)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    cov = np.zeros(shape, dtype=np.float64)
    if x1 <= x0 or y1 <= y0:
        return cov, quad
    sub = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).reshape(-1)
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).reshape(-1)
    gx, gy = np.meshgrid(xs, ys)
    p = np.stack([gx - center[0], gy - center[1]], axis=-1) @ rot / scale + half
    u, v = np.floor(p[..., 0]).astype(int), np.floor(p[..., 1]).astype(int)
    inside = (u >= 0) & (u < fw) & (v >= 0) & (v < fh)
    hit = np.zeros(u.shape, dtype=bool)
    hit[inside] = bmp[v[inside], u[inside]]
    block = hit.reshape(y1 - y0, supersample, x1 - x0, supersample).mean(axis=(1, 3))
    cov[y0:y1, x0:x1] = block
    return cov, quad


def _luminance(c):
    return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]


def generate_sample(rng: np.random.Generator, cfg: DatasetConfig | None = None) -> Sample:
    """One synthetic image with non-overlapping rotated words."""
    cfg = cfg or DatasetConfig()
    h, w = cfg.image_size
    n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1)) if cfg.max_words > 0 else 0
    bg = rng.uniform(0, 1, size=3)
    grad = rng.uniform(-0.15, 0.15, size=(2, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    image = bg + (xx[..., None] / w - 0.5) * grad[0] + (yy[..., None] / h - 0.5) * grad[1]
    instances: list[TextInstance] = []
    ink = np.zeros((h, w), dtype=bool)
    placed: list[sg.Polygon] = []
    for _ in range(n_words):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        word = "".join(rng.choice(list(cfg.charset), size=length))
        fw = length * (GLYPH_W + GAP) - GAP
        for _attempt in range(30):
            angle = float(rng.uniform(-cfg.rotation, cfg.rotation))
            scale = float(rng.uniform(*cfg.scale_range))
            ext = 0.5 * math.hypot(fw * scale, GLYPH_H * scale)
            if 2 * (ext + cfg.margin) >= min(h, w):
                scale *= 0.7
                continue
            center = rng.uniform([ext + cfg.margin] * 2, [w - ext - cfg.margin, h - ext - cfg.margin])
            cov, quad = _render_word(word, angle, scale, center, (h, w))
            shape = sg.Polygon(quad)
            if any(shape.buffer(cfg.margin).intersects(o) for o in placed):
                continue
            text_color = rng.uniform(0, 1, size=3)
            while abs(_luminance(text_color) - _luminance(bg)) < 0.35:
                text_color = rng.uniform(0, 1, size=3)
            image = image * (1 - cov[..., None]) + text_color * cov[..., None]
            ink |= cov > 0.5
            placed.append(shape)
            instances.append(TextInstance(Polygon(quad), word))
            break
    image = image + rng.normal(0, cfg.noise, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return build_sample(image, instances, cfg.shrink_ratio, ink=ink)


def generate_dataset(seed: int, count: int, cfg: DatasetConfig | None = None, start: int = 0) -> list[Sample]:
    return [generate_sample(np.random.default_rng([seed, i]), cfg) for i in range(start, start + count)]


# ----------------------------------------------------------------------------
# targets


def _shrunk(poly: Polygon, shrink_ratio: float) -> tuple[Polygon, float]:
    d = shrink_offset(poly, shrink_ratio)
    return offset_polygon(poly, -d), d


def make_prob_target(instances: list[TextInstance], size: tuple[int, int],
                     shrink_ratio: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Filled shrunk polygons and the loss mask (zero over ignored instances).

    Instances whose shrunk polygon collapses are flagged ignore in place.
    """
    prob = np.zeros(size, dtype=np.float32)
    mask = np.ones(size, dtype=np.float32)
    for inst in instances:
        if not inst.ignore:
            try:
                shrunk, _ = _shrunk(inst.polygon, shrink_ratio)
                if shrunk.area < 1.0:
                    raise DegenerateRegionError("shrunk polygon is too small")
            except DegenerateRegionError:
                inst.ignore = True
        if inst.ignore:
            mask[rasterize(inst.polygon, size)] = 0
        else:
            prob[rasterize(shrunk, size)] = 1
    return prob, mask


def make_thresh_target(instances: list[TextInstance], size: tuple[int, int],
                       shrink_ratio: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Threshold map rising to ``T_MAX`` on polygon borders over the band between
    the shrunk and dilated polygons; ``T_MIN`` elsewhere."""
    h, w = size
    target = np.full(size, T_MIN, dtype=np.float32)
    band = np.zeros(size, dtype=bool)
    for inst in instances:
        if inst.ignore:
            continue
        d = shrink_offset(inst.polygon, shrink_ratio)
        if d <= 0:
            continue
        outer = offset_polygon(inst.polygon, d)
        try:
            inner_mask = rasterize(offset_polygon(inst.polygon, -d), size)
        except DegenerateRegionError:
            inner_mask = np.zeros(size, dtype=bool)
        ring = rasterize(outer, size) & ~inner_mask
        ys, xs = np.nonzero(ring)
        if ys.size == 0:
            continue
        dist = edge_distance(np.stack([xs + 0.5, ys + 0.5], axis=1), inst.polygon)
        val = T_MAX - (T_MAX - T_MIN) * np.clip(dist / d, 0, 1)
        target[ys, xs] = np.maximum(target[ys, xs], val)
        band[ys, xs] = True
    return target, band


def build_sample(image: np.ndarray, instances: list[TextInstance], shrink_ratio: float = 0.4,
                 ink: np.ndarray | None = None) -> Sample:
    size = image.shape[:2]
    prob, pmask = make_prob_target(instances, size, shrink_ratio)
    thresh, tmask = make_thresh_target(instances, size, shrink_ratio)
    return Sample(image, instances, prob, pmask, thresh, tmask, ink)


# ----------------------------------------------------------------------------
# augmentation


def _warp(image: np.ndarray, inv: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample: output pixel centre ``p`` reads input at ``inv @ [p, 1]``."""
    h, w = out_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx + 0.5, yy + 0.5
    sx = inv[0, 0] * px + inv[0, 1] * py + inv[0, 2] - 0.5
    sy = inv[1, 0] * px + inv[1, 1] * py + inv[1, 2] - 0.5
    chans = [ndimage.map_coordinates(image[..., c], [sy, sx], order=1, mode="grid-constant", cval=0.0)
             for c in range(image.shape[2])]
    return np.stack(chans, axis=-1).astype(image.dtype)


def _affine_inverse(m: np.ndarray) -> np.ndarray:
    full = np.vstack([m, [0, 0, 1]])
    return np.linalg.inv(full)[:2]


def _apply_affine(image, instances, m, out_shape):
    inv = _affine_inverse(m)
    if np.allclose(m, [[1, 0, 0], [0, 1, 0]]) and out_shape == image.shape[:2]:
        warped = image.copy()
    else:
        warped = _warp(image, inv, out_shape)
    moved = [TextInstance(i.polygon.transformed(m), i.transcription, i.ignore) for i in instances]
    return warped, moved


def _clip_instances(instances, shape):
    """Drop instances outside the frame; clip and ignore the ones cut by it."""
    h, w = shape
    frame = sg.box(0, 0, w, h)
    kept = []
    for inst in instances:
        poly = sg.Polygon(inst.polygon.vertices)
        if not poly.intersects(frame) or poly.intersection(frame).area <= 0:
            continue
        if frame.buffer(1e-6).contains(poly):
            kept.append(inst)
            continue
        part = poly.intersection(frame)
        if part.geom_type != "Polygon":
            part = max(part.geoms, key=lambda g: g.area) if hasattr(part, "geoms") else None
        if part is None or part.area <= 0:
            continue
        kept.append(TextInstance(Polygon(np.asarray(part.exterior.coords)[:-1]), inst.transcription, True))
    for inst in kept:
        if inst.polygon.area < 4:
            inst.ignore = True
    return kept


def _safe_crop_origin(instances, shape, crop, rng, tries: int = 50):
    h, w = shape
    ch, cw = min(crop, h), min(crop, w)
    if ch == h and cw == w:
        return 0, 0
    boxes = [inst.polygon.bounds() for inst in instances if not inst.ignore]

    def cuts(lo, hi, axis):
        for b in boxes:
            a0, a1 = (b[0], b[2]) if axis == 0 else (b[1], b[3])
            if (a0 < lo < a1) or (a0 < hi < a1):
                return True
        return False

    best = None
    for _ in range(tries):
        x = int(rng.integers(0, w - cw + 1))
        y = int(rng.integers(0, h - ch + 1))
        if not cuts(x, x + cw, 0) and not cuts(y, y + ch, 1):
            inside = sum(1 for b in boxes if b[0] >= x and b[2] <= x + cw and b[1] >= y and b[3] <= y + ch)
            if inside or not boxes:
                return x, y
            best = best or (x, y)
    if best is not None:
        return best
    return int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))


def draw_augment_params(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation))
    scale = float(rng.uniform(*cfg.resize_range))
    jitter = None
    if rng.uniform() < cfg.jitter_prob:
        jitter = tuple(float(v) for v in rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=3))
    return AugmentParams(angle, scale, None, jitter)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None,
            params: AugmentParams | None = None, shrink_ratio: float = 0.4) -> Sample:
    """Rotate, resize, safe-crop and colour-jitter a sample; targets are rebuilt."""
    cfg = cfg or AugmentConfig()
    params = params or draw_augment_params(sample, rng, cfg)
    image, instances = sample.image, sample.instances
    h, w = image.shape[:2]

    if params.angle:
        c, s = math.cos(math.radians(params.angle)), math.sin(math.radians(params.angle))
        cx, cy = w / 2, h / 2
        m = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
        image, instances = _apply_affine(image, instances, m, (h, w))
        instances = _clip_instances(instances, (h, w))

    if params.scale != 1.0:
        nh, nw = max(int(round(h * params.scale)), 1), max(int(round(w * params.scale)), 1)
        m = np.array([[nw / w, 0, 0], [0, nh / h, 0]])
        image, instances = _apply_affine(image, instances, m, (nh, nw))
        h, w = nh, nw

    crop = cfg.crop_size
    x, y = params.crop_xy if params.crop_xy is not None else _safe_crop_origin(instances, (h, w), crop, rng)
    ch, cw = min(crop, h), min(crop, w)
    if (x, y, ch, cw) != (0, 0, h, w):
        image = image[y:y + ch, x:x + cw]
        instances = [TextInstance(i.polygon.translated((-x, -y)), i.transcription, i.ignore) for i in instances]
        instances = _clip_instances(instances, (ch, cw))
    if image.shape[0] < crop or image.shape[1] < crop:
        padded = np.zeros((max(crop, image.shape[0]), max(crop, image.shape[1]), 3), dtype=image.dtype)
        padded[:image.shape[0], :image.shape[1]] = image
        image = padded

    if params.jitter is not None:
        b, c, s = params.jitter
        image = image * b
        mean = image.mean()
        image = (image - mean) * c + mean
        gray = (image * np.array([0.299, 0.587, 0.114])).sum(-1, keepdims=True)
        image = gray + (image - gray) * s
        image = np.clip(image, 0, 1)

    instances = [replace(i) for i in instances]
    return build_sample(np.ascontiguousarray(image, dtype=np.float32), instances, shrink_ratio)


# ----------------------------------------------------------------------------
# inference resizing


@dataclass
class ResizeInfo:
    scale_x: float  # original / resized
    scale_y: float
    resized: tuple[int, int]
    padded: tuple[int, int]

    def to_original(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * np.array([self.scale_x, self.scale_y])


def resize_for_inference(image: np.ndarray, long_side: int) -> tuple[np.ndarray, ResizeInfo]:
    """Aspect-preserving resize so the longer side equals ``long_side``, zero-padded to multiples of 32."""
    h, w = image.shape[:2]
    f = long_side / max(h, w)
    nh, nw = max(int(round(h * f)), 1), max(int(round(w * f)), 1)
    if (nh, nw) == (h, w):
        resized = image
    else:
        m = np.array([[nw / w, 0, 0], [0, nh / h, 0]])
        resized = _warp(image, _affine_inverse(m), (nh, nw))
    ph, pw = -(-nh // 32) * 32, -(-nw // 32) * 32
    out = np.zeros((ph, pw, image.shape[2]), dtype=np.float32)
    out[:nh, :nw] = resized
    return out, ResizeInfo(w / nw, h / nh, (nh, nw), (ph, pw))


# ----------------------------------------------------------------------------
# disk format


def format_annotation(instances: list[TextInstance]) -> str:
    lines = []
    for inst in instances:
        coords = ",".join(_fmt(v) for v in inst.polygon.to_flat())
        lines.append(f"{coords}\t{IGNORE_TEXT if inst.ignore else inst.transcription}")
    return "\n".join(lines) + ("\n" if lines else "")


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("", "-0") else s


def parse_annotation(text: str) -> list[TextInstance]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        coords, _, trans = line.partition("\t")
        try:
            poly = Polygon.from_flat([float(v) for v in coords.split(",")])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        ignore = trans == IGNORE_TEXT
        out.append(TextInstance(poly, "" if ignore else trans, ignore))
    return out


def save_dataset(directory: str | os.PathLike, samples: list[Sample]) -> None:
    from .imageio import write_png

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_png(d / f"img_{i:05d}.png", s.image)
        (d / f"img_{i:05d}.txt").write_text(format_annotation(s.instances))


def load_dataset(directory: str | os.PathLike, shrink_ratio: float = 0.4) -> list[Sample]:
    """Pairs of ``name.png`` (or ``.ppm``) and ``name.txt`` annotation files."""
    from .imageio import read_image

    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    samples = []
    for ann in sorted(d.glob("*.txt")):
        img_path = next((ann.with_suffix(ext) for ext in (".png", ".ppm") if ann.with_suffix(ext).exists()), None)
        if img_path is None:
            continue
        image = read_image(img_path)
        samples.append(build_sample(image, parse_annotation(ann.read_text()), shrink_ratio))
    return samples
