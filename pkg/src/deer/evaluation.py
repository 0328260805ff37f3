"""Detection and end-to-end metrics, lexicon correction and the evaluation harnesses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from shapely import geometry as sg

from . import tensor as T
from .data import Sample, TextInstance, resize_for_inference
from .geometry import (
    DegenerateRegionError,
    Polygon,
    centroid,
    detect_polygons,
    inner_reference,
    polygon_iou,
    reference_corners,
    shift_reference,
)
from .model import DEER, images_to_tensor

DEFAULT_BETAS = (0.0, 0.1, 0.2, 0.3, 0.4)


# ----------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]

    @property
    def n_gt(self) -> int:
        return len(self.pairs) + len(self.unmatched_gt)

    @property
    def n_pred(self) -> int:
        return len(self.pairs) + len(self.unmatched_pred)


def match_detections(gts: Sequence[Polygon], preds: Sequence[Polygon], iou_threshold: float = 0.5,
                     gt_ignore: Sequence[bool] | None = None) -> MatchResult:
    """Greedy one-to-one matching by descending IoU.

    Ignored ground truths are not scored, and neither are predictions that
    overlap an ignored ground truth at the threshold.
    """
    gt_ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    iou = np.zeros((len(gts), len(preds)))
    for i, g in enumerate(gts):
        for j, p in enumerate(preds):
            iou[i, j] = polygon_iou(g, p)
    cared_gt = [i for i in range(len(gts)) if not gt_ignore[i]]
    ignored = [i for i in range(len(gts)) if gt_ignore[i]]
    cared_pred = [j for j in range(len(preds))
                  if not any(iou[i, j] >= iou_threshold for i in ignored)]
    cands = sorted(((iou[i, j], i, j) for i in cared_gt for j in cared_pred if iou[i, j] >= iou_threshold),
                   key=lambda c: (-c[0], c[1], c[2]))
    used_g, used_p, pairs = set(), set(), []
    for v, i, j in cands:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        pairs.append((i, j, float(v)))
    return MatchResult(pairs, [i for i in cared_gt if i not in used_g], [j for j in cared_pred if j not in used_p])


def prf(tp: int, n_gt: int, n_pred: int) -> tuple[float, float, float]:
    r = tp / n_gt if n_gt else 0.0
    p = tp / n_pred if n_pred else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return r, p, f


def detection_prf(match: MatchResult) -> tuple[float, float, float]:
    """``(recall, precision, f_measure)``."""
    return prf(len(match.pairs), match.n_gt, match.n_pred)


# ----------------------------------------------------------------------------
# words


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_correct(word: str, lexicon: Sequence[str]) -> str:
    """Closest lexicon entry by case-insensitive edit distance; ties go to the smallest entry."""
    if not lexicon:
        raise ValueError("lexicon is empty")
    w = word.lower()
    return min(lexicon, key=lambda e: (edit_distance(w, e.lower()), e))


def ic15_filter(word: str) -> tuple[str, bool]:
    """Strip non-alphanumeric characters at either end; flag words shorter than 3 as ignored."""
    start, end = 0, len(word)
    while start < end and not word[start].isalnum():
        start += 1
    while end > start and not word[end - 1].isalnum():
        end -= 1
    out = word[start:end]
    return out, len(out) < 3


# ----------------------------------------------------------------------------
# spotting


@dataclass
class SpottingResult:
    polygon: Polygon
    text: str
    confidence: float
    reference: np.ndarray  # pixel coordinates in the original image
    score: float = 1.0


@dataclass
class EvalConfig:
    long_side: int = 128
    iou_threshold: float = 0.5
    case_sensitive: bool = False
    ic15_rules: bool = False
    gt_points: bool = False
    point_mode: str = "center"
    prob_threshold: float = 0.3
    dilation: float = 1.5
    min_score: float = 0.5
    min_area: int = 4

    def __post_init__(self):
        if self.point_mode not in ("center", "inner"):
            raise ValueError(f"point_mode must be center or inner, got {self.point_mode!r}")


def _reference(poly: Polygon, mode: str) -> np.ndarray:
    if mode == "inner":
        return inner_reference(poly, "infer")
    return centroid(poly)


def _prepare(model: DEER, image: np.ndarray, long_side: int):
    resized, info = resize_for_inference(image, long_side)
    with T.no_grad():
        memory, pos = model.encode(images_to_tensor(resized[None].astype(T.get_dtype())))
    return resized, info, memory, pos


def _read(model, memory, pos, refs_px: np.ndarray, padded_hw) -> list[tuple[str, float]]:
    if len(refs_px) == 0:
        return []
    h, w = padded_hw
    norm = np.clip(np.asarray(refs_px, dtype=np.float64) / np.array([w, h]), 0.0, 1.0)
    return model.recognize(memory, pos, norm)


def _clip_to_frame(poly: Polygon, w: int, h: int) -> Polygon | None:
    """Intersection with the image rectangle (largest piece), or None if nothing is left."""
    part = sg.Polygon(poly.vertices).intersection(sg.box(0, 0, w, h))
    if part.is_empty or part.area <= 0:
        return None
    if part.geom_type != "Polygon":
        part = max((g for g in part.geoms if g.geom_type == "Polygon"), key=lambda g: g.area)
    return Polygon(np.asarray(part.exterior.coords)[:-1])


def spot(model: DEER, image: np.ndarray, cfg: EvalConfig | None = None) -> list[SpottingResult]:
    """Full inference: detect regions, pick reference points, read text, map back to the input frame."""
    cfg = cfg or EvalConfig()
    resized, info, memory, pos = _prepare(model, image, cfg.long_side)
    with T.no_grad():
        prob = model.locate(memory).probability.data[0]
    stride_y = resized.shape[0] / prob.shape[0]
    stride_x = resized.shape[1] / prob.shape[1]
    regions = []
    for poly, score in detect_polygons(prob, cfg.prob_threshold, cfg.dilation, cfg.min_area, cfg.min_score):
        poly = poly.scaled(stride_x, stride_y)
        try:
            ref = _reference(poly, cfg.point_mode)
        except DegenerateRegionError:
            continue
        regions.append((poly, ref, score))
    texts = _read(model, memory, pos, np.array([r[1] for r in regions]).reshape(-1, 2), info.padded)
    h, w = image.shape[:2]
    out = []
    for (poly, ref, score), (text, conf) in zip(regions, texts):
        clipped = _clip_to_frame(Polygon(info.to_original(poly.vertices)), w, h)
        if clipped is None:
            continue
        out.append(SpottingResult(clipped, text, conf, info.to_original(ref), score))
    return out


def spot_at_points(model: DEER, image: np.ndarray, instances: Sequence[TextInstance],
                   cfg: EvalConfig | None = None, beta: float = 0.0) -> list[SpottingResult]:
    """Read text at reference points taken from ground-truth polygons (shifted toward the top-left by ``beta``)."""
    cfg = cfg or EvalConfig()
    resized, info, memory, pos = _prepare(model, image, cfg.long_side)
    keep = [i for i in instances if not i.ignore]
    refs = []
    for inst in keep:
        ref = _reference(inst.polygon, cfg.point_mode)
        if beta:
            ref = shift_reference(ref, reference_corners(inst.polygon)[0], beta)
        refs.append(ref)
    refs_px = np.asarray(refs, dtype=np.float64).reshape(-1, 2) / np.array([info.scale_x, info.scale_y])
    texts = _read(model, memory, pos, refs_px, info.padded)
    return [SpottingResult(inst.polygon, text, conf, ref)
            for inst, ref, (text, conf) in zip(keep, refs, texts)]


# ----------------------------------------------------------------------------
# scoring


def _normalize_text(s: str, cfg: EvalConfig) -> str:
    return s if cfg.case_sensitive else s.lower()


def _gt_view(gts: Sequence[TextInstance], ic15_rules: bool):
    out = []
    for g in gts:
        text, ignore = g.transcription, g.ignore
        if ic15_rules and not ignore:
            text, short = ic15_filter(text)
            ignore = short
        out.append((g.polygon, text, ignore))
    return out


def e2e_counts(gts: Sequence[TextInstance], preds: Sequence[SpottingResult], lexicon: Sequence[str] | None = None,
               iou_threshold: float = 0.5, cfg: EvalConfig | None = None) -> tuple[int, int, int]:
    """``(true positives, scored ground truths, scored predictions)`` for one image."""
    cfg = cfg or EvalConfig(iou_threshold=iou_threshold)
    view = _gt_view(gts, cfg.ic15_rules)
    match = match_detections([v[0] for v in view], [p.polygon for p in preds], iou_threshold,
                             [v[2] for v in view])
    tp = 0
    for gi, pj, _ in match.pairs:
        text = preds[pj].text
        if cfg.ic15_rules:
            text = ic15_filter(text)[0]
        if lexicon:
            text = lexicon_correct(text, lexicon)
        if _normalize_text(text, cfg) == _normalize_text(view[gi][1], cfg):
            tp += 1
    return tp, match.n_gt, match.n_pred


def e2e_fscore(gts: Sequence[TextInstance], preds: Sequence[SpottingResult], lexicon: Sequence[str] | None = None,
               iou_threshold: float = 0.5, cfg: EvalConfig | None = None) -> float:
    return prf(*e2e_counts(gts, preds, lexicon, iou_threshold, cfg))[2]


@dataclass
class EvalReport:
    sections: dict[str, dict[str, object]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def format(self) -> str:
        lines = []
        for name, items in self.sections.items():
            lines.append(f"[{name}]")
            for k, v in items.items():
                lines.append(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")
            lines.append("")
        return "\n".join(lines)


def evaluate(model: DEER, dataset: Sequence[Sample], cfg: EvalConfig | None = None,
             lexicon: Sequence[str] | None = None, beta: float = 0.0) -> EvalReport:
    """Detection and end-to-end metrics over ``dataset``.

    In ``gt_points`` mode text is read at ground-truth reference points and the
    detection section reports the (trivially perfect) ground-truth regions.
    """
    cfg = cfg or EvalConfig()
    det = [0, 0, 0]
    e2e = [0, 0, 0]
    e2e_lex = [0, 0, 0]
    words = correct = 0
    for sample in dataset:
        if cfg.gt_points:
            preds = spot_at_points(model, sample.image, sample.instances, cfg, beta)
        else:
            preds = spot(model, sample.image, cfg)
        view = _gt_view(sample.instances, cfg.ic15_rules)
        m = match_detections([v[0] for v in view], [p.polygon for p in preds], cfg.iou_threshold,
                             [v[2] for v in view])
        det = [det[0] + len(m.pairs), det[1] + m.n_gt, det[2] + m.n_pred]
        e2e = [a + b for a, b in zip(e2e, e2e_counts(sample.instances, preds, None, cfg.iou_threshold, cfg))]
        if lexicon:
            e2e_lex = [a + b for a, b in zip(e2e_lex, e2e_counts(sample.instances, preds, lexicon,
                                                                 cfg.iou_threshold, cfg))]
        for gi, pj, _ in m.pairs:
            words += 1
            correct += _normalize_text(preds[pj].text, cfg) == _normalize_text(view[gi][1], cfg)
    report = EvalReport()
    r, p, f = prf(*det)
    report.sections["detection"] = {"images": len(dataset), "gt": det[1], "pred": det[2], "matched": det[0],
                                    "recall": r, "precision": p, "f_measure": f}
    r, p, f = prf(*e2e)
    report.sections["e2e_none"] = {"true_positive": e2e[0], "recall": r, "precision": p, "f_measure": f}
    if lexicon:
        r, p, f = prf(*e2e_lex)
        report.sections["e2e_full"] = {"lexicon_size": len(lexicon), "true_positive": e2e_lex[0],
                                       "recall": r, "precision": p, "f_measure": f}
    report.sections["recognition"] = {"matched_words": words,
                                      "accuracy": correct / words if words else 0.0}
    report.sections["protocol"] = {
        "mode": "gt_points" if cfg.gt_points else "detected",
        "point_mode": cfg.point_mode,
        "beta": float(beta),
        "iou_threshold": float(cfg.iou_threshold),
        "long_side": cfg.long_side,
        "case_sensitive": cfg.case_sensitive,
        "ic15_rules": cfg.ic15_rules,
    }
    return report


def run_beta_ablation(model: DEER, dataset: Sequence[Sample], betas: Sequence[float] = DEFAULT_BETAS,
                      cfg: EvalConfig | None = None) -> dict[float, float]:
    """End-to-end F at ground-truth reference points shifted toward the top-left corner by each ``beta``."""
    base = cfg or EvalConfig()
    gt_cfg = EvalConfig(**{**base.__dict__, "gt_points": True})
    return {float(b): float(evaluate(model, dataset, gt_cfg, beta=b).get("e2e_none", "f_measure"))
            for b in betas}


def format_beta_csv(curve: dict[float, float]) -> str:
    return "beta,e2e_f\n" + "".join(f"{b:.2f},{f:.6f}\n" for b, f in curve.items())
