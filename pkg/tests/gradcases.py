"""Gradient-check cases shared by the unit tests and the acceptance run.

Every case returns ``(fn, inputs, tol)``; sampling cases use tolerance 1e-3 and
keep each sampling location at least 1e-3 pixel from grid lines.
"""
import numpy as np

from deer import tensor as T
from deer.model import DecoderLayer, EncoderLayer, ModelConfig, ScoreMaps, approx_binary
from deer.nn import (
    DeformableAttention,
    MultiHeadAttention,
    MultiScaleValue,
    bilinear_sample,
    ms_deform_sample,
    token_centers,
)
from deer.tensor import Tensor
from deer.training import DetectionTargets, db_losses, recognition_loss

SAMPLING_TOL = 1e-3
DENSE_TOL = 1e-4
GRID_MARGIN = 1e-3


def grid_margin(loc, shapes):
    """Smallest distance (in pixels) of any sampling coordinate from a pixel-centre line."""
    loc = np.asarray(loc)
    worst = np.inf
    for lv, (h, w) in enumerate(shapes):
        pts = loc[..., lv, :, :] if loc.ndim == 6 else loc
        px = pts[..., 0] * w - 0.5
        py = pts[..., 1] * h - 0.5
        worst = min(worst, np.abs(px - np.round(px)).min(), np.abs(py - np.round(py)).min())
    return worst


def _tiny_cfg():
    return ModelConfig(d_model=8, num_heads=2, num_points=2, ffn_dim=8, enc_layers=1, dec_layers=2,
                       backbone_channels=(4, 4, 4, 4), charset="AB", max_text_len=4)


def _jitter_module(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(0, scale, size=p.shape)


SHAPES = [(4, 5), (2, 3)]


def _seeded(builder, shapes_of):
    """Try seeds until every sampling location clears the grid margin."""
    for seed in range(200):
        case = builder(np.random.default_rng(seed))
        if shapes_of(case) >= GRID_MARGIN:
            return case
    raise RuntimeError("no seed keeps sampling points off grid lines")


def case_bilinear():
    def build(rng):
        value = Tensor(rng.normal(size=(3, 4, 2)))
        p = Tensor(rng.uniform(0.05, 0.95, size=2))
        return value, p

    value, p = _seeded(build, lambda c: grid_margin(c[1].data.reshape(1, 1, 2), [(3, 4)]))
    return (lambda v, q: bilinear_sample(v, q)), [value, p], SAMPLING_TOL


def case_ms_deform_sample():
    def build(rng):
        total = sum(h * w for h, w in SHAPES)
        value = Tensor(rng.normal(size=(2, total, 2, 3)))
        loc = Tensor(rng.uniform(-0.1, 1.1, size=(2, 3, 2, 2, 2, 2)))
        attn = Tensor(rng.uniform(0.1, 1.0, size=(2, 3, 2, 2, 2)))
        return value, loc, attn

    value, loc, attn = _seeded(build, lambda c: grid_margin(c[1].data, SHAPES))
    return (lambda v, l, a: ms_deform_sample(v, SHAPES, l, a)), [value, loc, attn], SAMPLING_TOL


def case_deformable_attention():
    def build(rng):
        mod = DeformableAttention(8, 2, len(SHAPES), 2, rng)
        _jitter_module(mod, rng, 0.2)
        total = sum(h * w for h, w in SHAPES)
        query = Tensor(rng.normal(size=(1, 3, 8)))
        tokens = Tensor(rng.normal(size=(1, total, 8)))
        ref = rng.uniform(0.2, 0.8, size=(3, 2))
        loc, _ = mod.sampling(query, ref, SHAPES)
        return mod, query, tokens, ref, loc.data

    mod, query, tokens, ref, _ = _seeded(build, lambda c: grid_margin(c[4], SHAPES))

    def fn(q, tok):
        return mod(q, ref, MultiScaleValue(tok, SHAPES))

    return fn, [query, tokens], SAMPLING_TOL


def case_plain_attention():
    rng = np.random.default_rng(11)
    mod = MultiHeadAttention(8, 2, rng)
    q, k, v = (Tensor(rng.normal(size=(2, n, 8))) for n in (3, 5, 5))
    mask = np.zeros((3, 5), dtype=bool)
    mask[0, 3:] = True
    return (lambda a, b, c: mod(a, b, c, mask=mask)), [q, k, v], DENSE_TOL


def case_encoder_layer():
    cfg = _tiny_cfg()

    def build(rng):
        layer = EncoderLayer(cfg, len(SHAPES), rng)
        _jitter_module(layer, rng, 0.2)
        total = sum(h * w for h, w in SHAPES)
        x = Tensor(rng.normal(size=(1, total, 8)))
        pos = Tensor(rng.normal(size=(total, 8)))
        ref = token_centers(SHAPES)
        y = layer.norm1(x)
        loc, _ = layer.attn.sampling(T.add(y, pos), ref, SHAPES)
        return layer, x, pos, ref, loc.data

    layer, x, pos, ref, _ = _seeded(build, lambda c: grid_margin(c[4], SHAPES))

    def fn(tokens, gamma):
        layer.norm2.gamma = gamma
        return layer(MultiScaleValue(tokens, SHAPES), pos, ref).tokens

    return fn, [x, Tensor(layer.norm2.gamma.data)], SAMPLING_TOL


def case_decoder_layers():
    """One deformable and one plain decoder layer stacked."""
    cfg = _tiny_cfg()

    def build(rng):
        layers = [DecoderLayer(cfg, "deformable", len(SHAPES), rng), DecoderLayer(cfg, "plain", len(SHAPES), rng)]
        for layer in layers:
            _jitter_module(layer, rng, 0.2)
        total = sum(h * w for h, w in SHAPES)
        x = Tensor(rng.normal(size=(2, 3, 8)))
        mem = Tensor(rng.normal(size=(1, total, 8)))
        key = Tensor(rng.normal(size=(1, total, 8)))
        ref = Tensor(np.broadcast_to(rng.uniform(0.2, 0.8, size=(2, 1, 2)), (2, 3, 2)).copy())
        first = layers[0]
        y = first.norm1(x)
        x1 = T.add(x, first.self_attn(y, y, y))
        loc, _ = first.cross.sampling(first.norm2(x1), ref, SHAPES)
        return layers, x, mem, key, ref, loc.data

    layers, x, mem, key, ref, _ = _seeded(build, lambda c: grid_margin(c[5], SHAPES))
    idx = np.zeros(2, dtype=np.int64)

    def fn(inp, memory):
        value = MultiScaleValue(memory, SHAPES)
        h = inp
        for layer in layers:
            h = layer(h, value, key, ref, idx)
        return h

    return fn, [x, mem], SAMPLING_TOL


def _maps_and_targets(rng, shape=(2, 6, 6)):
    p = Tensor(rng.uniform(0.05, 0.95, size=shape))
    t = Tensor(rng.uniform(0.2, 0.8, size=shape))
    gt = (rng.uniform(size=shape) < 0.3).astype(float)
    targets = DetectionTargets(gt, np.ones(shape), rng.uniform(0.3, 0.7, size=shape),
                               (rng.uniform(size=shape) < 0.5).astype(float))
    return p, t, targets


def case_db_losses():
    """The three detection losses summed with distinct weights (mining selection held fixed)."""
    rng = np.random.default_rng(21)
    p, t, targets = _maps_and_targets(rng)
    # keep |T - target| away from the kink at zero
    targets.thresh = np.where(np.abs(t.data - targets.thresh) < 0.05, t.data + 0.1, targets.thresh)

    def fn(prob, thresh):
        maps = ScoreMaps(prob, thresh, approx_binary(prob, thresh, 5.0))
        l_s, l_b, l_t = db_losses(maps, targets)
        return T.add(T.add(l_s, T.scale(l_b, 2.0)), T.scale(l_t, 3.0))

    return fn, [p, t], DENSE_TOL


def case_recognition_loss():
    rng = np.random.default_rng(22)
    logits = Tensor(rng.normal(size=(2, 4, 5)))
    targets = np.array([[3, 4, 2, 0], [2, 0, 0, 0]])
    return (lambda x: recognition_loss(x, targets, 0)), [logits], DENSE_TOL


CASES = {
    "bilinear_sampling": case_bilinear,
    "ms_deform_sample": case_ms_deform_sample,
    "deformable_attention": case_deformable_attention,
    "plain_attention": case_plain_attention,
    "encoder_layer": case_encoder_layer,
    "decoder_layers": case_decoder_layers,
    "db_losses": case_db_losses,
    "recognition_loss": case_recognition_loss,
}


def run_case(name):
    """Build the case in float64 and compare its gradients with central differences."""
    from deer.gradcheck import check_gradients

    with T.precision("float64"):
        fn, inputs, tol = CASES[name]()
        return check_gradients(fn, inputs, tol=tol)
