"""Losses, Adam with warmup plus cosine schedule, and the training loop."""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .data import (
    AugmentConfig,
    DatasetConfig,
    Sample,
    TextInstance,
    augment,
    generate_sample,
    make_prob_target,
    make_thresh_target,
)
from .geometry import DegenerateRegionError, centroid, inner_reference, perturb_reference
from .model import DEER, ScoreMaps, images_to_tensor
from .tensor import ConfigurationError, Tensor

EPS = 1e-6
NEG_RATIO = 3
NEG_FLOOR = 100  # hardest negatives kept when a batch has no positive pixel


@dataclass
class TrainConfig:
    lambda_s: float = 1.0
    lambda_b: float = 1.0
    lambda_t: float = 10.0
    lr_base: float = 3e-4
    lr_min: float = 1e-6
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 8
    n_instances: int = 2
    perturb_enabled: bool = True
    detection_supervision: bool = True
    point_mode: str = "center"
    weight_decay: float = 1e-6
    grad_clip: float = 5.0
    augment: bool = False
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ConfigurationError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})")
        for name in ("lambda_s", "lambda_b", "lambda_t"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.point_mode not in ("center", "inner"):
            raise ConfigurationError(f"point_mode must be center or inner, got {self.point_mode!r}")
        if self.batch_size < 1 or self.n_instances < 0:
            raise ConfigurationError("batch_size must be positive and n_instances non-negative")


# ----------------------------------------------------------------------------
# losses


def recognition_loss(logits: Tensor, target_ids, pad_id: int) -> Tensor:
    """Mean cross-entropy over the non-padding target positions."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        return Tensor(np.zeros((), dtype=T.get_dtype()))
    return T.cross_entropy(logits, target_ids, ignore_index=pad_id)


@dataclass
class DetectionTargets:
    """Per-pixel targets at the resolution of the location-head maps, batched."""
    prob: np.ndarray
    prob_mask: np.ndarray
    thresh: np.ndarray
    thresh_mask: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "DetectionTargets":
        return cls(np.stack([s.prob_target for s in samples]), np.stack([s.prob_mask for s in samples]),
                   np.stack([s.thresh_target for s in samples]), np.stack([s.thresh_mask for s in samples]))


def targets_at_resolution(sample: Sample, shape: tuple[int, int], shrink_ratio: float = 0.4) -> Sample:
    """Rebuild the sample's label maps on a coarser grid of ``shape``."""
    h, w = sample.image.shape[:2]
    if (h, w) == tuple(shape):
        return sample
    sx, sy = shape[1] / w, shape[0] / h
    scaled = [TextInstance(i.polygon.scaled(sx, sy), i.transcription, i.ignore) for i in sample.instances]
    prob, pmask = make_prob_target(scaled, shape, shrink_ratio)
    thresh, tmask = make_thresh_target(scaled, shape, shrink_ratio)
    return Sample(sample.image, sample.instances, prob, pmask, thresh, tmask)


def mining_selection(bce: np.ndarray, gt: np.ndarray, mask: np.ndarray, ratio: int = NEG_RATIO) -> np.ndarray:
    """Positives plus the hardest negatives (at most ``ratio`` per positive, or
    ``NEG_FLOOR`` of them when there is no positive at all)."""
    valid = mask > 0
    pos = (gt > 0.5) & valid
    neg = (gt <= 0.5) & valid
    n_pos = int(pos.sum())
    n_neg = int(min(neg.sum(), ratio * n_pos if n_pos else NEG_FLOOR))
    sel = pos.copy()
    if n_neg:
        flat_neg = np.flatnonzero(neg)
        order = np.argsort(-bce.reshape(-1)[flat_neg], kind="stable")
        sel.reshape(-1)[flat_neg[order[:n_neg]]] = True
    return sel


def db_losses(maps: ScoreMaps, targets) -> tuple[Tensor, Tensor, Tensor]:
    """``(L_s, L_b, L_t)`` for batched score maps; ``targets`` is a Sample or DetectionTargets."""
    if isinstance(targets, Sample):
        targets = DetectionTargets.from_samples([targets])
    dtype = maps.probability.data.dtype
    gt = targets.prob.astype(dtype).reshape(maps.probability.shape)
    pmask = targets.prob_mask.reshape(gt.shape)
    bce = T.binary_cross_entropy(maps.probability, gt)
    sel = mining_selection(bce.data, gt, pmask).astype(dtype)
    count = float(sel.sum())
    l_s = T.scale(T.tsum(T.mul(bce, sel)), 1.0 / (count + EPS))

    inter = T.tsum(T.mul(maps.approx_binary, gt * sel))
    union = T.add(T.tsum(T.mul(maps.approx_binary, sel)), float((gt * sel).sum()) + EPS)
    l_b = T.sub(1.0, T.scale(T.div(inter, union), 2.0))

    tmask = targets.thresh_mask.reshape(gt.shape).astype(dtype)
    n_band = float(tmask.sum())
    diff = T.tabs(T.sub(maps.threshold, targets.thresh.astype(dtype).reshape(gt.shape)))
    l_t = T.scale(T.tsum(T.mul(diff, tmask)), 1.0 / n_band if n_band else 0.0)
    return l_s, l_b, l_t


def total_loss(l_r, l_s, l_b, l_t, cfg: TrainConfig) -> Tensor:
    l_r = T.as_tensor(l_r)
    if not cfg.detection_supervision:
        return l_r
    out = l_r
    for lam, term in ((cfg.lambda_s, l_s), (cfg.lambda_b, l_b), (cfg.lambda_t, l_t)):
        out = T.add(out, T.scale(T.as_tensor(term), lam))
    return out


# ----------------------------------------------------------------------------
# optimisation


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_base * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + (cfg.lr_base - cfg.lr_min) * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
              keys: Sequence | None = None):
    """In-place bias-corrected Adam with decoupled weight decay.

    Parameters whose gradient is ``None`` are left untouched, decay included.
    Moment buffers are keyed by ``keys`` (default: position).
    """
    state.step += 1
    t = state.step
    keys = list(range(len(params))) if keys is None else list(keys)
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for key, p, g in zip(keys, params, grads):
        if g is None:
            continue
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype)
    return params, state


def clip_gradients(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if max_norm and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for g in grads:
            if g is not None:
                g *= f
    return norm


# ----------------------------------------------------------------------------
# one step


@dataclass
class LossBreakdown:
    total: float
    l_r: float
    l_s: float
    l_b: float
    l_t: float
    lr: float
    grad_norm: float = 0.0


def instance_reference(inst: TextInstance, image_size: tuple[int, int], cfg: TrainConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Normalized training reference point for one instance."""
    poly = inst.polygon
    if cfg.point_mode == "inner":
        p = inner_reference(poly, "train", rng)
    elif cfg.perturb_enabled:
        try:
            p = perturb_reference(poly, rng)
        except DegenerateRegionError:
            p = centroid(poly)
    else:
        p = centroid(poly)
    h, w = image_size
    return np.clip(p / np.array([w, h], dtype=np.float64), 0.0, 1.0)


def _trainable(inst: TextInstance, model: DEER) -> bool:
    vocab = set(model.cfg.charset)
    return (not inst.ignore and 0 < len(inst.transcription) <= model.cfg.max_text_len
            and set(inst.transcription) <= vocab)


def build_recognition_batch(model: DEER, batch: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator):
    """Sample up to ``n_instances`` words per image; returns refs, inputs, targets, image index."""
    refs, texts, owners = [], [], []
    for b, s in enumerate(batch):
        cands = [i for i in s.instances if _trainable(i, model)]
        if not cands:
            continue
        k = min(cfg.n_instances, len(cands))
        picks = np.sort(rng.choice(len(cands), size=k, replace=False))
        for j in picks:
            refs.append(instance_reference(cands[j], s.image.shape[:2], cfg, rng))
            texts.append(cands[j].transcription)
            owners.append(b)
    mc = model.cfg
    if not texts:
        return None
    length = max(len(t) for t in texts) + 1
    inputs = np.full((len(texts), length), mc.pad_id, dtype=np.int64)
    targets = np.full((len(texts), length), mc.pad_id, dtype=np.int64)
    for n, text in enumerate(texts):
        ids = mc.encode_text(text)
        inputs[n, 0] = mc.bos_id
        inputs[n, 1:len(ids) + 1] = ids
        targets[n, :len(ids)] = ids
        targets[n, len(ids)] = mc.eos_id
    return np.asarray(refs), inputs, targets, np.asarray(owners, dtype=np.int64)


def train_step(model: DEER, batch: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
               state: AdamState, step: int | None = None) -> LossBreakdown:
    """Forward, loss, backward and one optimizer update on ``batch``."""
    step = state.step if step is None else step
    lr = lr_at_step(min(step, cfg.total_steps), cfg)
    model.zero_grad()
    images = images_to_tensor(np.stack([s.image for s in batch]).astype(T.get_dtype()))
    memory, pos = model.encode(images)

    zero = Tensor(np.zeros((), dtype=T.get_dtype()))
    l_s = l_b = l_t = zero
    if cfg.detection_supervision:
        maps = model.locate(memory)
        shape = maps.probability.shape[1:]
        targets = DetectionTargets.from_samples([targets_at_resolution(s, shape) for s in batch])
        l_s, l_b, l_t = db_losses(maps, targets)

    rec = build_recognition_batch(model, batch, cfg, rng)
    if rec is None:
        l_r = zero
    else:
        refs, inputs, tgt, owners = rec
        logits = model.decode(memory, pos, refs, inputs, owners)
        l_r = recognition_loss(logits, tgt, model.cfg.pad_id)

    loss = total_loss(l_r, l_s, l_b, l_t, cfg)
    T.backward(loss)
    named = list(model.named_parameters())
    grads = [p.grad for _, p in named]
    norm = clip_gradients(grads, cfg.grad_clip)
    adam_step([p.data for _, p in named], grads, state, lr, weight_decay=cfg.weight_decay,
              keys=[n for n, _ in named])
    return LossBreakdown(loss.item(), l_r.item(), l_s.item(), l_b.item(), l_t.item(), lr, norm)


# ----------------------------------------------------------------------------
# loop, checkpoints, metrics


METRICS_HEADER = "step\tL\tL_r\tL_s\tL_b\tL_t\tlr"


def format_metrics(step: int, b: LossBreakdown) -> str:
    vals = (b.total, b.l_r, b.l_s, b.l_b, b.l_t, b.lr)
    return "\t".join([str(step)] + [f"{v:.8g}" for v in vals])


def save_checkpoint(path, model: DEER, state: AdamState | None = None, meta: str | None = None) -> None:
    """Model weights, optional optimizer state and an optional text blob (the resolved run config)."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if meta is not None:
        tensors["meta.config"] = np.frombuffer(meta.encode(), dtype=np.uint8).astype(np.float32)
    if state is not None:
        tensors["optim.step"] = np.array([state.step], dtype=np.float64)
        for k, m in state.m.items():
            tensors[f"optim.m.{k}"] = m
            tensors[f"optim.v.{k}"] = state.v[k]
    save_tensors(path, tensors)


def load_checkpoint(path, model: DEER) -> AdamState:
    """Restore model weights in place; returns the optimizer state stored alongside."""
    tensors = load_tensors(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    state = AdamState()
    if "optim.step" in tensors:
        state.step = int(tensors["optim.step"][0])
        dtype = T.get_dtype()
        for k, v in tensors.items():
            if k.startswith("optim.m."):
                name = k[len("optim.m."):]
                state.m[name] = v.astype(dtype)
                state.v[name] = tensors[f"optim.v.{name}"].astype(dtype)
    return state


def checkpoint_meta(path) -> str | None:
    tensors = load_tensors(path)
    blob = tensors.get("meta.config")
    return None if blob is None else blob.astype(np.uint8).tobytes().decode()


def batch_for_step(step: int, cfg: TrainConfig, data_cfg: DatasetConfig,
                   aug_cfg: AugmentConfig | None = None, dataset: Sequence[Sample] | None = None) -> list[Sample]:
    """The batch used at ``step``; a pure function of (seed, step)."""
    out = []
    pick = np.random.default_rng([cfg.seed, 2, step])
    for i in range(cfg.batch_size):
        rng = np.random.default_rng([cfg.seed, 0, step, i])
        if dataset is not None:
            s = dataset[int(pick.integers(len(dataset)))]
        else:
            s = generate_sample(rng, data_cfg)
        if cfg.augment:
            s = augment(s, rng, aug_cfg or AugmentConfig(crop_size=data_cfg.image_size[0]),
                        shrink_ratio=data_cfg.shrink_ratio)
        out.append(s)
    return out


def train(model: DEER, cfg: TrainConfig, data_cfg: DatasetConfig | None = None, out_dir=None,
          state: AdamState | None = None, dataset: Sequence[Sample] | None = None,
          aug_cfg: AugmentConfig | None = None, log: Callable[[str], None] | None = None,
          meta: str | None = None) -> AdamState:
    """Run from ``state.step`` to ``cfg.total_steps``.

    With ``out_dir`` set, appends to ``metrics.tsv`` and writes
    ``checkpoints/step_XXXXXX.ckpt`` every ``checkpoint_every`` steps plus ``last.ckpt``.
    """
    data_cfg = data_cfg or DatasetConfig()
    state = state or AdamState()
    metrics = None
    ckdir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckdir = out_dir / "checkpoints"
        ckdir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.tsv"
        if state.step == 0 or not mpath.exists():
            mpath.write_text(METRICS_HEADER + "\n")
        else:
            _truncate_metrics(mpath, state.step)
        metrics = open(mpath, "a")
    try:
        while state.step < cfg.total_steps:
            step = state.step
            batch = batch_for_step(step, cfg, data_cfg, aug_cfg, dataset)
            t0 = time.perf_counter()
            b = train_step(model, batch, cfg, np.random.default_rng([cfg.seed, 1, step]), state, step)
            if not math.isfinite(b.total):
                raise FloatingPointError(f"non-finite loss at step {step}")
            line = format_metrics(step, b)
            if metrics is not None:
                metrics.write(line + "\n")
                metrics.flush()
            if log is not None:
                log(f"{line}\t{time.perf_counter() - t0:.2f}s")
            done = state.step
            if ckdir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
                save_checkpoint(ckdir / f"step_{done:06d}.ckpt", model, state, meta)
                save_checkpoint(ckdir / "last.ckpt", model, state, meta)
    finally:
        if metrics is not None:
            metrics.close()
    return state


def _truncate_metrics(path: Path, step: int) -> None:
    """Keep the header and the lines for steps before ``step`` (used when resuming)."""
    lines = path.read_text().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:] if ln and int(ln.split("\t", 1)[0]) < step]
    path.write_text("\n".join(kept) + "\n")
