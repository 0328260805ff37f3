import numpy as np
import pytest

from deer import tensor as T
from deer.checkpoint import CheckpointError, load_tensors, save_tensors
from deer.model import DEER, ModelConfig, approx_binary, beam_search, greedy_decode, images_to_tensor
from deer.tensor import ConfigurationError, Tensor
from deer.training import AdamState, checkpoint_meta, load_checkpoint, save_checkpoint

TINY = dict(d_model=16, num_heads=2, num_points=2, ffn_dim=16, enc_layers=1, dec_layers=2,
            backbone_channels=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def model():
    return DEER(ModelConfig(**TINY))


def encode(model, h, w, seed=0):
    img = np.random.default_rng(seed).uniform(size=(1, h, w, 3)).astype(np.float32)
    with T.no_grad():
        return model.encode(images_to_tensor(img))


@pytest.mark.parametrize("h,w,shapes", [
    (64, 64, [(16, 16), (8, 8), (4, 4), (2, 2)]),
    (128, 96, [(32, 24), (16, 12), (8, 6), (4, 3)]),
])
def test_pyramid_shapes_and_full_resolution_maps(model, h, w, shapes):
    memory, pos = encode(model, h, w)
    assert memory.level_shapes == shapes
    assert memory.tokens.shape == (1, sum(a * b for a, b in shapes), 16)
    assert pos.shape == (memory.total_len, 16)
    with T.no_grad():
        maps = model.locate(memory)
    for m in (maps.probability, maps.threshold, maps.approx_binary):
        assert m.shape == (1, h, w)
        assert (m.data > 0).all() and (m.data < 1).all()


def test_backbone_rejects_unpadded_input(model):
    with pytest.raises(ConfigurationError, match="multiple of 32"):
        encode(model, 100, 64)


def test_token_indexing_for_64_pixel_input(model):
    memory, _ = encode(model, 64, 64)
    assert memory.total_len == 340
    assert memory.unflatten_index(256) == (1, 0, 0)
    for idx in range(340):
        assert memory.flat_index(*memory.unflatten_index(idx)) == idx


def test_approx_binary_values():
    p = Tensor(np.full((2, 2), 0.4))
    assert np.allclose(approx_binary(p, p, 50.0).data, 0.5)
    got = approx_binary(Tensor(np.array([0.6])), Tensor(np.array([0.5])), 50.0).data[0]
    assert got == pytest.approx(1 / (1 + np.exp(-5.0)), abs=1e-6)


def _zero_output_projections(m):
    for layer in m.encoder.layers:
        for lin in (layer.attn.out_proj, layer.ffn.fc2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0


def test_zeroed_encoder_is_identity():
    m = DEER(ModelConfig(**TINY))
    _zero_output_projections(m)
    img = np.random.default_rng(1).uniform(size=(1, 64, 64, 3)).astype(np.float32)
    with T.no_grad():
        tokens = m.tokenizer(m.backbone(images_to_tensor(img)))
        out = m.encoder(tokens, m.positions(tokens.level_shapes))
    assert np.array_equal(out.tokens.data, tokens.tokens.data)


def test_decoder_is_causal(model):
    memory, pos = encode(model, 64, 64)
    ids = np.array([[1, 5, 6, 7, 8]])
    with T.no_grad():
        a = model.decode(memory, pos, [[0.4, 0.5]], ids, [0]).data
        ids2 = ids.copy()
        ids2[0, 3] = 9
        b = model.decode(memory, pos, [[0.4, 0.5]], ids2, [0]).data
    assert np.array_equal(a[:, :3], b[:, :3])
    assert not np.array_equal(a[:, 3:], b[:, 3:])


def test_decoder_logit_shape_and_reference_dependence(model):
    memory, pos = encode(model, 64, 64)
    ids = np.array([[1, 4], [1, 4]])
    with T.no_grad():
        out = model.decode(memory, pos, [[0.2, 0.2], [0.8, 0.7]], ids, [0, 0]).data
    assert out.shape == (2, 2, len(model.cfg.vocab))
    assert not np.allclose(out[0], out[1])


def test_decoder_rejects_out_of_vocab_ids(model):
    memory, pos = encode(model, 64, 64)
    with pytest.raises(ValueError):
        model.decode(memory, pos, [[0.5, 0.5]], np.array([[1, 99]]), [0])


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        ModelConfig(dec_layers=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(charset="AAB")
    cfg = ModelConfig()
    assert len({cfg.pad_id, cfg.bos_id, cfg.eos_id}) == 3
    assert cfg.decode_ids(cfg.encode_text("HEX")) == "HEX"


def _rigged(script, vocab=6, eos=2):
    """Logits that spell ``script`` and then EOS, whatever the prefix."""
    def step(ids):
        t = ids.shape[1] - 1
        out = np.zeros((ids.shape[0], vocab))
        out[:, script[t] if t < len(script) else eos] = 5.0
        return out
    return step


def test_greedy_rigged_cases():
    assert greedy_decode(_rigged([]), 1, 1, 2, 10)[0] == [[]]
    seqs, conf = greedy_decode(_rigged([3, 4]), 2, 1, 2, 10)
    assert seqs == [[3, 4], [3, 4]]
    p = np.exp(5) / (np.exp(5) + 5)
    assert conf[0] == pytest.approx(p)
    assert greedy_decode(_rigged([3, 3, 3, 3]), 1, 1, 2, 2)[0] == [[3, 3]]


def test_greedy_breaks_ties_toward_lower_index():
    seqs, _ = greedy_decode(lambda ids: np.zeros((ids.shape[0], 5)), 1, 1, 2, 3)
    assert seqs == [[0, 0, 0]]


def test_greedy_equals_width_one_beam_search():
    for case in range(50):
        rng = np.random.default_rng(case)
        table = rng.normal(size=(7, 6)) * 2

        def step(ids, table=table):
            last = ids[:, -1]
            return table[(last * 3 + ids.shape[1]) % 7]

        (g,), (gc,) = greedy_decode(step, 1, 1, 2, 6)
        b, bc = beam_search(step, 1, 2, 6, width=1)
        assert g == b
        assert gc == pytest.approx(bc, abs=1e-12)


def test_checkpoint_round_trip_and_meta(tmp_path):
    m = DEER(ModelConfig(**TINY))
    state = AdamState(3, {"a": np.ones(2, np.float32)}, {"a": np.full(2, 2.0, np.float32)})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, state, meta="model.d_model = 16\n")
    other = DEER(ModelConfig(seed=9, **TINY))
    restored = load_checkpoint(path, other)
    for k, v in m.state_dict().items():
        assert np.array_equal(other.state_dict()[k], v.astype(np.float32))
    assert restored.step == 3 and np.array_equal(restored.v["a"], [2, 2])
    assert checkpoint_meta(path) == "model.d_model = 16\n"
    assert path.read_bytes()[:8] == b"DEERCKPT"


def test_checkpoint_format_errors(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"x": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)})
    loaded = load_tensors(path)
    assert loaded["x"].shape == (2, 3) and loaded["s"].shape == () and loaded["s"] == 2.5
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    for name in ("bad", "short", "long"):
        with pytest.raises(CheckpointError):
            load_tensors(tmp_path / f"{name}.ckpt")


def test_gradients_reach_every_parameter_after_one_step():
    from deer.data import DatasetConfig, generate_dataset
    from deer.training import TrainConfig, train_step

    m = DEER(ModelConfig(**TINY))
    batch = generate_dataset(0, 2, DatasetConfig(image_size=(64, 64), scale_range=(1.0, 1.4), max_len=4))
    cfg = TrainConfig(warmup_steps=1, total_steps=5, batch_size=2)
    state = AdamState()
    # offset and weight projections start at zero, so query gradients appear from the second step on
    for step in (1, 2):
        train_step(m, batch, cfg, np.random.default_rng(step), state, step)
    dead = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []
