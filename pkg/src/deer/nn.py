"""Neural building blocks: parameters, layers, attention and positional codes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from ._kernels import ms_sample_backward, ms_sample_forward
from .tensor import DimensionError, Tensor

# one raw offset unit spans this many pixels at every level
OFFSET_PIXELS = 1.0


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Parameter container; parameters and child modules are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def to_dtype(self) -> None:
        """Recast every parameter to the current global precision."""
        for p in self.parameters():
            p.data = p.data.astype(T.get_dtype())


def _uniform(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(rng, (d_in, d_out), bound)
        self.bias = _uniform(rng, (d_out,), bound) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, eps: float = 1e-5):
        if channels % num_groups:
            raise T.ConfigurationError(f"{channels} channels not divisible into {num_groups} groups")
        self.num_groups = num_groups
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = _uniform(rng, (c_out, c_in, k, k), bound)
        self.bias = _uniform(rng, (c_out,), bound) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = _uniform(rng, (c_in, c_out, k, k), bound)
        self.bias = _uniform(rng, (c_out,), bound)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0, 1.0 / math.sqrt(d), size=(n, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


# ----------------------------------------------------------------------------
# multi-scale tokens


@dataclass
class MultiScaleValue:
    """Flattened multi-level tokens ``(B, total_len, d)`` with level metadata."""

    tokens: Tensor
    level_shapes: list[tuple[int, int]]

    def __post_init__(self):
        total = sum(h * w for h, w in self.level_shapes)
        if self.tokens.shape[-2] != total:
            raise DimensionError(f"{self.tokens.shape[-2]} tokens but levels hold {total}")

    @property
    def level_offsets(self) -> list[int]:
        offs = [0]
        for h, w in self.level_shapes[:-1]:
            offs.append(offs[-1] + h * w)
        return offs

    @property
    def total_len(self) -> int:
        return self.tokens.shape[-2]

    def flat_index(self, level: int, y: int, x: int) -> int:
        h, w = self.level_shapes[level]
        if not (0 <= y < h and 0 <= x < w):
            raise IndexError(f"({y}, {x}) outside level {level} of shape {(h, w)}")
        return self.level_offsets[level] + y * w + x

    def unflatten_index(self, idx: int) -> tuple[int, int, int]:
        if not 0 <= idx < self.total_len:
            raise IndexError(idx)
        offs = self.level_offsets
        level = int(np.searchsorted(offs, idx, side="right") - 1)
        rem = idx - offs[level]
        w = self.level_shapes[level][1]
        return level, rem // w, rem % w

    def level(self, i: int) -> Tensor:
        """Tokens of one level as ``(B, h*w, d)``."""
        start = self.level_offsets[i]
        h, w = self.level_shapes[i]
        return self.tokens[:, start:start + h * w]

    def with_tokens(self, tokens: Tensor) -> "MultiScaleValue":
        return MultiScaleValue(tokens, list(self.level_shapes))


def token_centers(level_shapes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Pixel-centre normalised ``(x, y)`` of every flattened token, ``(total, 2)``."""
    pts = []
    for h, w in level_shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return np.concatenate(pts, axis=0)


# ----------------------------------------------------------------------------
# sampling


def _shape_arrays(level_shapes):
    shapes = np.asarray(level_shapes, dtype=np.int64).reshape(-1, 2)
    starts = np.concatenate([[0], np.cumsum(shapes[:, 0] * shapes[:, 1])[:-1]]).astype(np.int64)
    return shapes, starts


def ms_deform_sample(value: Tensor, level_shapes, loc: Tensor, attn: Tensor,
                     value_index: np.ndarray | None = None) -> Tensor:
    """Attention-weighted bilinear samples summed over levels and points.

    value ``(Bv, Lv, H, D)``; loc ``(B, Q, H, L, K, 2)`` normalised ``(x, y)``;
    attn ``(B, Q, H, L, K)``. Query batch ``b`` reads value batch
    ``value_index[b]`` (identity when omitted). Returns ``(B, Q, H, D)``.
    """
    shapes, starts = _shape_arrays(level_shapes)
    B = attn.shape[0]
    if value_index is None:
        if value.shape[0] != B:
            raise DimensionError(f"value batch {value.shape[0]} != query batch {B}")
        value_index = np.arange(B)
    vidx = np.asarray(value_index, dtype=np.int64)
    vd = np.ascontiguousarray(value.data)
    ld = np.ascontiguousarray(loc.data)
    ad = np.ascontiguousarray(attn.data)
    out = ms_sample_forward(vd, shapes, starts, vidx, ld, ad)

    def bw(g):
        gv, gl, ga = ms_sample_backward(np.ascontiguousarray(g), vd, shapes, starts, vidx, ld, ad)
        return gv, gl, ga

    return T._make(out, (value, loc, attn), bw)


def bilinear_sample(value: Tensor, p: Tensor) -> Tensor:
    """Bilinear read of an ``(h, w, d)`` map at normalised point ``p = (x, y)``.

    Pixel centre ``i`` sits at ``(i + 0.5) / n``; pixels beyond the border are zero.
    """
    h, w, d = value.shape
    v = T.reshape(value, (1, h * w, 1, d))
    loc = T.reshape(p, (1, 1, 1, 1, 1, 2))
    ones = Tensor(np.ones((1, 1, 1, 1, 1)))
    return T.reshape(ms_deform_sample(v, [(h, w)], loc, ones), (d,))


class DeformableAttention(Module):
    """Multi-scale deformable attention.

    Each head samples ``K`` points per level at ``p_ref + offset / (w_l, h_l)``
    and mixes them with weights softmaxed jointly over levels and points.
    """

    def __init__(self, d_model: int, num_heads: int, num_levels: int, num_points: int,
                 rng: np.random.Generator):
        if d_model % num_heads:
            raise T.ConfigurationError(f"d_model {d_model} not divisible by {num_heads} heads")
        self.d_model = d_model
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        n = num_heads * num_levels * num_points
        self.offsets = Linear(d_model, n * 2, rng)
        self.weights = Linear(d_model, n, rng)
        self.value_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.reset_sampling()
        self.record = False
        self.last_locations: np.ndarray | None = None
        self.last_weights: np.ndarray | None = None

    def reset_sampling(self) -> None:
        """Star of radius one pixel around the reference, uniform weights."""
        H, L, K = self.num_heads, self.num_levels, self.num_points
        self.offsets.weight.data[...] = 0
        angles = 2 * np.pi * np.arange(H * K) / (H * K)
        star = np.stack([np.cos(angles), np.sin(angles)], axis=-1).reshape(H, 1, K, 2)
        bias = np.broadcast_to(star * OFFSET_PIXELS, (H, L, K, 2))
        self.offsets.bias.data[...] = bias.reshape(-1)
        self.weights.zero_()

    def sampling(self, query: Tensor, ref: Tensor | np.ndarray, level_shapes):
        """Sampling locations ``(B, Q, H, L, K, 2)`` and weights ``(B, Q, H, L, K)``."""
        B, Q, _ = query.shape
        H, L, K = self.num_heads, self.num_levels, self.num_points
        if len(level_shapes) != L:
            raise DimensionError(f"{len(level_shapes)} levels given, module built for {L}")
        raw = T.reshape(self.offsets(query), (B, Q, H, L, K, 2))
        wh = np.asarray([[w, h] for h, w in level_shapes], dtype=T.get_dtype())
        off = T.mul(raw, Tensor(1.0 / wh[None, None, None, :, None, :]))
        ref = T.as_tensor(ref)
        if ref.ndim == 2:
            ref = T.reshape(ref, (1, ref.shape[0], 1, 1, 1, 2))
        else:
            ref = T.reshape(ref, (ref.shape[0], ref.shape[1], 1, 1, 1, 2))
        loc = T.add(off, ref)
        logits = T.reshape(self.weights(query), (B, Q, H, L * K))
        attn = T.reshape(T.softmax(logits, axis=-1), (B, Q, H, L, K))
        return loc, attn

    def __call__(self, query: Tensor, ref, value: MultiScaleValue,
                 value_index: np.ndarray | None = None) -> Tensor:
        if query.shape[-1] != self.d_model or value.tokens.shape[-1] != self.d_model:
            raise DimensionError(
                f"d_model mismatch: query {query.shape}, value {value.tokens.shape}, module {self.d_model}")
        B, Q, _ = query.shape
        H = self.num_heads
        loc, attn = self.sampling(query, ref, value.level_shapes)
        if self.record:
            self.last_locations = loc.data.copy()
            self.last_weights = attn.data.copy()
        v = self.value_proj(value.tokens)
        Bv, Lv, _ = v.shape
        v = T.reshape(v, (Bv, Lv, H, self.d_model // H))
        sampled = ms_deform_sample(v, value.level_shapes, loc, attn, value_index)
        return self.out_proj(T.reshape(sampled, (B, Q, self.d_model)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; ``mask`` true marks blocked positions."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        if d_model % num_heads:
            raise T.ConfigurationError(f"d_model {d_model} not divisible by {num_heads} heads")
        self.d_model = d_model
        self.num_heads = num_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.record = False
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        H = self.num_heads
        return T.transpose(T.reshape(x, (B, N, H, self.d_model // H)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None,
                 kv_index: np.ndarray | None = None) -> Tensor:
        if query.shape[-1] != self.d_model or key.shape[-1] != self.d_model or value.shape[-1] != self.d_model:
            raise DimensionError(f"d_model mismatch: {query.shape}, {key.shape}, {value.shape}")
        B, Tq, _ = query.shape
        q = self._heads(self.q_proj(query))
        k = self.k_proj(key)
        v = self.v_proj(value)
        if kv_index is not None:
            k = T.take_rows(k, kv_index)
            v = T.take_rows(v, kv_index)
        k, v = self._heads(k), self._heads(v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_model // self.num_heads))
        if mask is not None:
            scores = T.masked_fill(scores, mask, -np.inf)
        attn = T.softmax(scores, axis=-1)
        if self.record:
            self.last_weights = attn.data.copy()
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.out_proj(T.reshape(out, (B, Tq, self.d_model)))


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# ----------------------------------------------------------------------------
# positional codes

POINT_SCALE = 16 * math.pi
POINT_TEMPERATURE = 1000.0


def sinusoidal_1d(pos: np.ndarray, dim: int, scale: float = POINT_SCALE,
                  temperature: float = POINT_TEMPERATURE) -> np.ndarray:
    """Interleaved ``[sin, cos, sin, cos, ...]`` code of ``pos`` over ``dim`` channels."""
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(dim // 2)
    freq = scale / temperature ** (2 * i / dim)
    ang = pos[..., None] * freq
    out = np.empty(pos.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def sinusoidal_point_encoding(p, d_model: int) -> np.ndarray:
    """Code of a normalised point: ``x`` over the first half, ``y`` over the second."""
    if d_model % 4:
        raise T.ConfigurationError(f"d_model {d_model} must be divisible by 4")
    p = np.asarray(p, dtype=np.float64)
    half = d_model // 2
    return np.concatenate([sinusoidal_1d(p[..., 0], half), sinusoidal_1d(p[..., 1], half)], axis=-1)
