"""Figures: result overlays, decoder attention maps, ablation and training curves."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .evaluation import SpottingResult  # noqa: E402
from .model import DEER  # noqa: E402


def render_overlay(image: np.ndarray, results: Sequence[SpottingResult], path: str | os.PathLike) -> None:
    """Polygons, ``+`` reference marks and transcriptions drawn over a copy of ``image``."""
    h, w = image.shape[:2]
    dpi = 100
    scale = max(1.0, 512 / max(h, w))
    fig = plt.figure(figsize=(w * scale / dpi, h * scale / dpi), dpi=dpi)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(np.clip(image, 0, 1), interpolation="nearest", extent=(0, w, h, 0))
    for r in results:
        v = np.vstack([r.polygon.vertices, r.polygon.vertices[:1]])
        ax.plot(v[:, 0], v[:, 1], color="lime", linewidth=1.5)
        ax.plot([r.reference[0]], [r.reference[1]], marker="+", color="red", markersize=10, mew=2)
        x0, y0 = r.polygon.vertices.min(axis=0)
        ax.text(x0, y0 - 1, r.text, color="yellow", fontsize=9, va="bottom",
                bbox=dict(facecolor="black", alpha=0.6, pad=1, edgecolor="none"))
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.savefig(path)
    plt.close(fig)


# ----------------------------------------------------------------------------
# attention


def plain_attention_heatmap(weights: np.ndarray, level_shapes, size: tuple[int, int]) -> np.ndarray:
    """Head-averaged, query-summed attention spread over an image grid of ``size``.

    ``weights`` is ``(heads, queries, tokens)``. Each level is upsampled with
    nearest-neighbour cells and divided by the cell area, so the map sums to
    the query count.
    """
    mass = weights.mean(axis=0).sum(axis=0)
    h, w = size
    out = np.zeros(size, dtype=np.float64)
    start = 0
    for lh, lw in level_shapes:
        level = mass[start:start + lh * lw].reshape(lh, lw)
        start += lh * lw
        fy, fx = h // lh, w // lw
        out += np.kron(level, np.ones((fy, fx))) / (fy * fx)
    return out


def deformable_splat_centers(locations: np.ndarray, weights: np.ndarray, size: tuple[int, int]):
    """Pixel centres and weights for every sampling point of one query: ``(H*L*K, 2)``, ``(H*L*K,)``."""
    h, w = size
    pts = locations.reshape(-1, 2) * np.array([w, h])
    return pts, weights.reshape(-1)


def splat(points: np.ndarray, weights: np.ndarray, size: tuple[int, int], sigma: float = 1.5) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    out = np.zeros(size)
    for (x, y), a in zip(points, weights):
        out += a * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))
    return out


def attention_maps(model: DEER, image: np.ndarray, ref_px: np.ndarray) -> list[tuple[int, str, np.ndarray]]:
    """Decode at ``ref_px`` on a padded image and return one heatmap per decoder layer.

    The recorded attention belongs to the last decoding call, which sees the
    whole predicted sequence.
    """
    from .model import images_to_tensor

    h, w = image.shape[:2]
    crosses = [layer.cross for layer in model.decoder.layers]
    for c in crosses:
        c.record = True
    try:
        with T.no_grad():
            memory, pos = model.encode(images_to_tensor(image[None].astype(T.get_dtype())))
            model.recognize(memory, pos, np.asarray(ref_px, dtype=np.float64).reshape(1, 2) / np.array([w, h]))
    finally:
        for c in crosses:
            c.record = False
    out = []
    for n, layer in enumerate(model.decoder.layers, 1):
        if layer.kind == "plain":
            heat = plain_attention_heatmap(layer.cross.last_weights[0], memory.level_shapes, (h, w))
        else:
            locs, wts = layer.cross.last_locations[0], layer.cross.last_weights[0]
            heat = np.zeros((h, w))
            for q in range(locs.shape[0]):
                pts, a = deformable_splat_centers(locs[q], wts[q], (h, w))
                heat += splat(pts, a, (h, w))
        out.append((n, layer.kind, heat))
    return out


def save_heatmap(heat: np.ndarray, path: str | os.PathLike, background: np.ndarray | None = None) -> None:
    norm = heat / heat.max() if heat.max() > 0 else heat
    if background is None:
        plt.imsave(path, norm, cmap="gray", vmin=0, vmax=1)
        return
    gray = background.mean(axis=-1, keepdims=True) * 0.4
    rgb = np.clip(gray + norm[..., None] * np.array([1.0, 0.85, 0.2]), 0, 1)
    plt.imsave(path, rgb)


# ----------------------------------------------------------------------------
# curves


def plot_beta_curves(curves: dict[str, dict[float, float]], path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    for label, curve in curves.items():
        betas = sorted(curve)
        ax.plot(betas, [curve[b] for b in betas], marker="o", label=label)
    ax.set_xlabel("beta (shift toward top-left corner)")
    ax.set_ylabel("end-to-end F")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(metrics_path: str | os.PathLike, path: str | os.PathLike) -> None:
    data = np.genfromtxt(metrics_path, delimiter="\t", names=True)
    data = np.atleast_1d(data)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.2), dpi=120)
    for name in ("L", "L_r", "L_s", "L_b", "L_t"):
        ax.plot(data["step"], data[name], label=name, linewidth=0.8)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    ax2.plot(data["step"], data["lr"])
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
