"""The spotting network: backbone, multi-scale encoder, location head and text decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import (
    Conv2d,
    ConvTranspose2d,
    DeformableAttention,
    Embedding,
    FeedForward,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    MultiScaleValue,
    Parameter,
    causal_mask,
    sinusoidal_point_encoding,
    token_centers,
)
from .tensor import ConfigurationError, Tensor

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
DEFAULT_CHARSET = "ACEHKLNPTX"


@dataclass
class ModelConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 6
    num_heads: int = 4
    num_points: int = 4
    charset: str = DEFAULT_CHARSET
    max_text_len: int = 25
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    ffn_dim: int = 128
    db_k: float = 50.0
    alternate_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if len(self.backbone_channels) != 4:
            raise ConfigurationError("backbone_channels needs four stage widths")
        if self.alternate_attention and self.dec_layers % 2:
            raise ConfigurationError(f"dec_layers must be even with alternating attention, got {self.dec_layers}")
        if len(set(self.charset)) != len(self.charset):
            raise ConfigurationError(f"charset has duplicate symbols: {self.charset!r}")
        if self.d_model % 4 or self.d_model % self.num_heads or self.d_model % 8:
            raise ConfigurationError(f"d_model {self.d_model} must be divisible by 8 and by num_heads")

    @property
    def vocab(self) -> list[str]:
        return [PAD, BOS, EOS] + list(self.charset)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def encode_text(self, text: str) -> list[int]:
        table = {c: i for i, c in enumerate(self.vocab)}
        try:
            return [table[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode_ids(self, ids: Sequence[int]) -> str:
        vocab = self.vocab
        return "".join(vocab[i] for i in ids if i > 2)


@dataclass
class ScoreMaps:
    probability: Tensor
    threshold: Tensor
    approx_binary: Tensor


def _gn_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(Module):
    def __init__(self, c_in, c_out, stride, rng):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, bias=False)
        self.norm = GroupNorm(_gn_groups(c_out), c_out)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class Backbone(Module):
    """Stem at stride 4 followed by three stride-2 stages."""

    def __init__(self, channels: Sequence[int], rng):
        c2, c3, c4, c5 = channels
        self.stages = [
            [ConvBlock(3, c2, 2, rng), ConvBlock(c2, c2, 2, rng)],
            [ConvBlock(c2, c3, 2, rng), ConvBlock(c3, c3, 1, rng)],
            [ConvBlock(c3, c4, 2, rng), ConvBlock(c4, c4, 1, rng)],
            [ConvBlock(c4, c5, 2, rng), ConvBlock(c5, c5, 1, rng)],
        ]
        self.stages = [_Seq(blocks) for blocks in self.stages]

    def __call__(self, images: Tensor) -> list[Tensor]:
        _, _, h, w = images.shape
        if h % 32 or w % 32:
            raise ConfigurationError(f"image size {h}x{w} must be a multiple of 32; pad first")
        feats = []
        x = images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _Seq(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Tokenizer(Module):
    """1x1 projection plus group norm per level, flattened and concatenated."""

    def __init__(self, channels: Sequence[int], d_model: int, rng):
        self.proj = [Conv2d(c, d_model, 1, rng) for c in channels]
        self.norm = [GroupNorm(_gn_groups(d_model), d_model) for _ in channels]

    def __call__(self, feats: Sequence[Tensor]) -> MultiScaleValue:
        parts, shapes = [], []
        for x, proj, norm in zip(feats, self.proj, self.norm):
            y = norm(proj(x))
            b, d, h, w = y.shape
            parts.append(T.transpose(T.reshape(y, (b, d, h * w)), (0, 2, 1)))
            shapes.append((h, w))
        return MultiScaleValue(T.concat(parts, axis=1), shapes)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, num_levels: int, rng):
        d = cfg.d_model
        self.norm1 = LayerNorm(d)
        self.attn = DeformableAttention(d, cfg.num_heads, num_levels, cfg.num_points, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng)

    def __call__(self, x: MultiScaleValue, pos: Tensor, ref: np.ndarray) -> MultiScaleValue:
        y = self.norm1(x.tokens)
        h = T.add(x.tokens, self.attn(T.add(y, pos), ref, x.with_tokens(y)))
        h = T.add(h, self.ffn(self.norm2(h)))
        return x.with_tokens(h)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, num_levels: int, rng):
        self.layers = [EncoderLayer(cfg, num_levels, rng) for _ in range(cfg.enc_layers)]

    def __call__(self, tokens: MultiScaleValue, pos: Tensor) -> MultiScaleValue:
        ref = token_centers(tokens.level_shapes).astype(T.get_dtype())
        for layer in self.layers:
            tokens = layer(tokens, pos, ref)
        return tokens


class _MapBranch(Module):
    def __init__(self, d, rng, bias_init=0.0):
        mid = max(d // 4, 1)
        self.up1 = ConvTranspose2d(d, mid, 2, rng, stride=2)
        self.norm = GroupNorm(_gn_groups(mid), mid)
        self.up2 = ConvTranspose2d(mid, mid, 2, rng, stride=2)
        self.out = Conv2d(mid, 1, 1, rng)
        self.out.bias.data[...] = bias_init

    def __call__(self, x):
        y = T.relu(self.norm(self.up1(x)))
        y = self.out(self.up2(y))
        b, _, h, w = y.shape
        return T.sigmoid(T.reshape(y, (b, h, w)))


class LocationHead(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.prob = _MapBranch(cfg.d_model, rng, bias_init=-2.0)
        self.thresh = _MapBranch(cfg.d_model, rng)
        self.k = cfg.db_k

    def __call__(self, tokens: MultiScaleValue) -> ScoreMaps:
        x = tokens.level(0)
        b, n, d = x.shape
        h, w = tokens.level_shapes[0]
        grid = T.reshape(T.transpose(x, (0, 2, 1)), (b, d, h, w))
        p = self.prob(grid)
        t = self.thresh(grid)
        return ScoreMaps(p, t, approx_binary(p, t, self.k))


def approx_binary(p: Tensor, t: Tensor, k: float) -> Tensor:
    return T.sigmoid(T.scale(T.sub(p, t), k))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, kind: str, num_levels: int, rng):
        d = cfg.d_model
        self.kind = kind
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, rng)
        self.norm2 = LayerNorm(d)
        if kind == "deformable":
            self.cross = DeformableAttention(d, cfg.num_heads, num_levels, cfg.num_points, rng)
        else:
            self.cross = MultiHeadAttention(d, cfg.num_heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng)

    def __call__(self, x: Tensor, memory: MultiScaleValue, memory_key: Tensor, ref: Tensor,
                 image_index: np.ndarray) -> Tensor:
        n, t, _ = x.shape
        y = self.norm1(x)
        x = T.add(x, self.self_attn(y, y, y, mask=causal_mask(t)))
        y = self.norm2(x)
        if self.kind == "deformable":
            x = T.add(x, self.cross(y, ref, memory, value_index=image_index))
        else:
            x = T.add(x, self.cross(y, memory_key, memory.tokens, kv_index=image_index))
        return T.add(x, self.ffn(self.norm3(x)))


class TextDecoder(Module):
    def __init__(self, cfg: ModelConfig, num_levels: int, rng):
        d = cfg.d_model
        self.cfg = cfg
        self.char_emb = Embedding(len(cfg.vocab), d, rng)
        self.pos_emb = Parameter(rng.normal(0, 0.02, size=(cfg.max_text_len + 1, d)))
        self.memory_norm = LayerNorm(d)
        kinds = ["deformable" if (i % 2 == 0 or not cfg.alternate_attention) else "plain"
                 for i in range(cfg.dec_layers)]
        self.layers = [DecoderLayer(cfg, k, num_levels, rng) for k in kinds]
        self.final_norm = LayerNorm(d)
        self.classifier = Linear(d, len(cfg.vocab), rng)

    def __call__(self, memory: MultiScaleValue, memory_pos: Tensor, q_ref: np.ndarray,
                 char_ids: np.ndarray, image_index: np.ndarray) -> Tensor:
        """Logits ``(N, T, V)`` for ``N`` instances with reference points ``q_ref``."""
        char_ids = np.asarray(char_ids, dtype=np.int64)
        n, t = char_ids.shape
        if t > self.cfg.max_text_len + 1:
            raise ValueError(f"sequence length {t} exceeds max_text_len + 1")
        if char_ids.size and (char_ids.min() < 0 or char_ids.max() >= len(self.cfg.vocab)):
            raise ValueError("character id outside vocabulary")
        q_ref = np.asarray(q_ref, dtype=T.get_dtype()).reshape(n, 2)
        point = Tensor(sinusoidal_point_encoding(q_ref, self.cfg.d_model)[:, None, :])
        x = T.add(T.add(self.char_emb(char_ids), self.pos_emb[:t]), point)
        mem = memory.with_tokens(self.memory_norm(memory.tokens))
        key = T.add(mem.tokens, memory_pos)
        ref = Tensor(np.broadcast_to(q_ref[:, None, :], (n, t, 2)).copy())
        for layer in self.layers:
            x = layer(x, mem, key, ref, image_index)
        return self.classifier(self.final_norm(x))


class DEER(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        num_levels = 4
        self.backbone = Backbone(cfg.backbone_channels, rng)
        self.tokenizer = Tokenizer(cfg.backbone_channels, cfg.d_model, rng)
        self.level_embed = Parameter(rng.normal(0, 0.02, size=(num_levels, cfg.d_model)))
        self.encoder = Encoder(cfg, num_levels, rng)
        self.location_head = LocationHead(cfg, rng)
        self.decoder = TextDecoder(cfg, num_levels, rng)

    def positions(self, level_shapes) -> Tensor:
        """Sinusoidal token-centre code plus the learned level embedding."""
        code = sinusoidal_point_encoding(token_centers(level_shapes), self.cfg.d_model)
        levels = np.repeat(np.arange(len(level_shapes)), [h * w for h, w in level_shapes])
        return T.add(Tensor(code), T.take_rows(self.level_embed, levels))

    def encode(self, images: Tensor) -> tuple[MultiScaleValue, Tensor]:
        """``images`` is ``(B, 3, H, W)``; returns refined tokens and their positions."""
        tokens = self.tokenizer(self.backbone(images))
        pos = self.positions(tokens.level_shapes)
        return self.encoder(tokens, pos), pos

    def locate(self, memory: MultiScaleValue) -> ScoreMaps:
        return self.location_head(memory)

    def decode(self, memory: MultiScaleValue, pos: Tensor, q_ref, char_ids, image_index) -> Tensor:
        return self.decoder(memory, pos, q_ref, char_ids, image_index)

    def recognize(self, memory: MultiScaleValue, pos: Tensor, q_refs, image_index=None) -> list[tuple[str, float]]:
        """Greedy transcription at each reference point."""
        q_refs = np.asarray(q_refs, dtype=np.float64).reshape(-1, 2)
        n = len(q_refs)
        if n == 0:
            return []
        if image_index is None:
            image_index = np.zeros(n, dtype=np.int64)

        def step(ids: np.ndarray) -> np.ndarray:
            with T.no_grad():
                return self.decode(memory, pos, q_refs, ids, image_index).data[:, -1]

        seqs, confs = greedy_decode(step, n, self.cfg.bos_id, self.cfg.eos_id, self.cfg.max_text_len)
        return [(self.cfg.decode_ids(s), c) for s, c in zip(seqs, confs)]


def images_to_tensor(images: np.ndarray) -> Tensor:
    """``(B, H, W, 3)`` or ``(H, W, 3)`` array to a channels-first tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode(step: Callable[[np.ndarray], np.ndarray], n: int, bos: int, eos: int,
                  max_len: int) -> tuple[list[list[int]], list[float]]:
    """Append the argmax symbol until EOS or ``max_len`` symbols.

    ``step(ids)`` maps all ``(n, t)`` prefixes to next-symbol logits ``(n, V)``;
    finished rows are padded with EOS.
    Confidence is the mean per-step maximum probability, EOS step included.
    """
    ids = np.full((n, 1), bos, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    seqs: list[list[int]] = [[] for _ in range(n)]
    probs: list[list[float]] = [[] for _ in range(n)]
    for _ in range(max_len + 1):
        active = np.nonzero(~done)[0]
        if active.size == 0:
            break
        p = _softmax_np(np.asarray(step(ids), dtype=np.float64)[active])
        nxt = p.argmax(axis=-1)
        for row, i in enumerate(active):
            probs[i].append(float(p[row, nxt[row]]))
            if nxt[row] == eos:
                done[i] = True
                continue
            seqs[i].append(int(nxt[row]))
            if len(seqs[i]) >= max_len:
                done[i] = True
        col = np.full((n, 1), eos, dtype=np.int64)
        col[active, 0] = nxt
        ids = np.concatenate([ids, col], axis=1)
    confs = [float(np.mean(p)) if p else 0.0 for p in probs]
    return seqs, confs


def beam_search(step: Callable[[np.ndarray], np.ndarray], bos: int, eos: int, max_len: int,
                width: int) -> tuple[list[int], float]:
    """Beam search over one sequence, ranked by summed log-probability.

    Returns the best finished sequence and the mean probability of its chosen
    symbols. Equal scores keep the lower beam, then the lower symbol id.
    """
    beams: list[tuple[list[int], float, list[float]]] = [([bos], 0.0, [])]
    finished: list[tuple[list[int], float, list[float]]] = []
    while beams:
        probs = _softmax_np(np.asarray(step(np.array([b[0] for b in beams], dtype=np.int64)),
                                       dtype=np.float64))
        cands = []
        for bi, (ids, lp, _) in enumerate(beams):
            for tok in range(probs.shape[1]):
                if probs[bi, tok] > 0:
                    cands.append((lp + float(np.log(probs[bi, tok])), bi, tok))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for lp, bi, tok in cands[:width]:
            ids, _, ch = beams[bi]
            chosen = ch + [float(probs[bi, tok])]
            if tok == eos:
                finished.append((ids[1:], lp, chosen))
            elif len(ids) == max_len:
                finished.append((ids[1:] + [tok], lp, chosen))
            else:
                nxt.append((ids + [tok], lp, chosen))
        beams = nxt
        if finished and beams and max(f[1] for f in finished) >= beams[0][1]:
            break
    best = max(finished, key=lambda f: f[1])
    return [int(i) for i in best[0]], float(np.mean(best[2]))
