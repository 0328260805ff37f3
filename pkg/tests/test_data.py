import numpy as np
import pytest
import shapely
from shapely import geometry as sg

from deer.data import (
    T_MAX,
    T_MIN,
    AugmentConfig,
    AugmentParams,
    DatasetConfig,
    TextInstance,
    augment,
    format_annotation,
    generate_dataset,
    generate_sample,
    load_dataset,
    make_prob_target,
    make_thresh_target,
    parse_annotation,
    resize_for_inference,
    save_dataset,
)
from deer.geometry import Polygon, point_in_polygon

from oracles import point_segment_distance


def rect(x0, y0, x1, y1):
    return Polygon([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def test_generation_is_deterministic():
    a = generate_sample(np.random.default_rng(42))
    b = generate_sample(np.random.default_rng(42))
    assert np.array_equal(a.image, b.image)
    assert [i.transcription for i in a.instances] == [i.transcription for i in b.instances]
    for x, y in zip(a.instances, b.instances):
        assert np.array_equal(x.polygon.vertices, y.polygon.vertices)
    assert np.array_equal(a.prob_target, b.prob_target)


def test_zero_words_gives_blank_sample():
    s = generate_sample(np.random.default_rng(0), DatasetConfig(min_words=0, max_words=0))
    assert s.instances == []
    assert not s.prob_target.any()
    assert not s.ink.any()


def test_generated_words_use_the_charset_and_length_bounds():
    cfg = DatasetConfig()
    for s in generate_dataset(3, 50, cfg):
        assert cfg.min_words <= len(s.instances) <= cfg.max_words
        for inst in s.instances:
            assert set(inst.transcription) <= set(cfg.charset)
            assert cfg.min_len <= len(inst.transcription) <= cfg.max_len


def test_instance_polygons_cover_their_ink():
    """Each ink pixel goes to its nearest word box; at least 60% must fall inside it."""
    worst = 1.0
    for s in generate_dataset(7, 1000):
        if not s.instances:
            continue
        ys, xs = np.nonzero(s.ink)
        pts = shapely.points(xs + 0.5, ys + 0.5)
        shapes = [sg.Polygon(inst.polygon.vertices) for inst in s.instances]
        dists = np.stack([shapely.distance(pts, shp) for shp in shapes])
        owner = np.argmin(dists, axis=0)
        for k, shp in enumerate(shapes):
            mine = owner == k
            if mine.any():
                worst = min(worst, shapely.contains_xy(shp, xs[mine] + 0.5, ys[mine] + 0.5).mean())
    assert worst >= 0.6


def test_prob_target_empty():
    prob, mask = make_prob_target([], (16, 16))
    assert not prob.any() and mask.all()


def test_prob_target_square_area():
    side = 40.0
    inst = TextInstance(rect(20, 20, 20 + side, 20 + side), "A")
    prob, _ = make_prob_target([inst], (80, 80), 0.4)
    d = side * side * (1 - 0.16) / (4 * side)
    inner = side - 2 * d
    assert abs(prob.sum() - inner ** 2) <= 0.5 * 4 * inner


def test_ignored_instance_masks_loss_only():
    inst = TextInstance(rect(5, 5, 25, 15), "", ignore=True)
    prob, mask = make_prob_target([inst], (32, 32))
    assert not prob.any()
    assert mask[10, 15] == 0 and mask[30, 30] == 1


def test_thresh_target_boundary_and_outside():
    poly = rect(10.5, 10.5, 50.5, 30.5)
    target, band = make_thresh_target([TextInstance(poly, "A")], (48, 64))
    assert target[20, 10] == pytest.approx(T_MAX)
    assert target[0, 0] == pytest.approx(T_MIN) and not band[0, 0]
    assert target.min() >= T_MIN - 1e-6 and target.max() <= T_MAX + 1e-6


def test_thresh_target_matches_distance_oracle():
    poly = Polygon([[12, 8], [50, 14], [46, 34], [10, 28]])
    target, band = make_thresh_target([TextInstance(poly, "A")], (48, 64), 0.4)
    d = poly.area * (1 - 0.16) / poly.perimeter
    v = poly.vertices
    ys, xs = np.nonzero(band)
    rng = np.random.default_rng(0)
    for k in rng.choice(len(ys), size=60, replace=False):
        p = np.array([xs[k] + 0.5, ys[k] + 0.5])
        dist = min(point_segment_distance(p, v[i], v[(i + 1) % 4]) for i in range(4))
        expect = T_MAX - (T_MAX - T_MIN) * min(dist / d, 1.0)
        assert target[ys[k], xs[k]] == pytest.approx(expect, abs=1e-3)


def test_identity_augmentation_is_a_no_op():
    s = generate_sample(np.random.default_rng(5))
    out = augment(s, np.random.default_rng(0), AugmentConfig(), AugmentParams(0.0, 1.0, (0, 0), None))
    assert np.abs(out.image - s.image).max() < 1e-6
    for a, b in zip(out.instances, s.instances):
        np.testing.assert_allclose(a.polygon.vertices, b.polygon.vertices, atol=1e-6)


def test_quarter_turn_rotates_polygons_exactly():
    s = generate_sample(np.random.default_rng(6))
    out = augment(s, np.random.default_rng(0), AugmentConfig(), AugmentParams(90.0, 1.0, (0, 0), None))
    np.testing.assert_allclose(out.image, np.rot90(s.image, -1), atol=1e-5)
    for a, b in zip(out.instances, s.instances):
        x, y = b.polygon.vertices[:, 0], b.polygon.vertices[:, 1]
        expected = np.stack([128 - y, x], axis=1)
        got = a.polygon.vertices
        assert a.polygon.area == pytest.approx(b.polygon.area, abs=1e-6)
        # same vertex set (the constructor may rotate the starting vertex)
        for p in expected:
            assert np.min(np.hypot(*(got - p).T)) < 1e-6


def test_augmented_instances_stay_inside_the_crop():
    cfg = AugmentConfig()
    rng = np.random.default_rng(9)
    for s in generate_dataset(11, 200):
        out = augment(s, rng, cfg)
        assert out.image.shape == (cfg.crop_size, cfg.crop_size, 3)
        for inst in out.instances:
            v = inst.polygon.vertices
            assert v.min() >= -1e-6 and v.max() <= cfg.crop_size + 1e-6
            if inst.polygon.area < 4:
                assert inst.ignore


def test_augmentation_is_deterministic():
    s = generate_sample(np.random.default_rng(1))
    a = augment(s, np.random.default_rng(3))
    b = augment(s, np.random.default_rng(3))
    assert np.array_equal(a.image, b.image)


@pytest.mark.parametrize("w,h,long_side,resized,padded", [
    (640, 480, 1280, (960, 1280), (960, 1280)),
    (100, 37, 1280, (474, 1280), (480, 1280)),
    (128, 64, 128, (64, 128), (64, 128)),
])
def test_resize_for_inference_sizes(w, h, long_side, resized, padded):
    out, info = resize_for_inference(np.zeros((h, w, 3), np.float32), long_side)
    assert info.resized == resized and out.shape[:2] == padded


def test_resize_round_trip_within_half_pixel():
    img = np.zeros((37, 100, 3), np.float32)
    img[20, 63] = 1.0
    out, info = resize_for_inference(img, 1280)
    lum = out[..., 0]
    ys, xs = np.nonzero(lum)
    wts = lum[ys, xs]
    found = np.array([(wts * (xs + 0.5)).sum(), (wts * (ys + 0.5)).sum()]) / wts.sum()
    back = info.to_original(found)
    assert np.hypot(*(back - [63.5, 20.5])) < 0.5


def test_annotation_round_trip(tmp_path):
    samples = generate_dataset(2, 3)
    samples[0].instances.append(TextInstance(rect(1, 1, 5, 5), "", ignore=True))
    save_dataset(tmp_path, samples)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 3
    for a, b in zip(loaded, samples):
        assert [i.transcription for i in a.instances] == [i.transcription for i in b.instances]
        assert [i.ignore for i in a.instances] == [i.ignore for i in b.instances]
        assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-6
    text = format_annotation(samples[0].instances)
    assert "###" in text
    assert len(parse_annotation(text)) == len(samples[0].instances)


def test_bad_annotation_line_names_the_line():
    with pytest.raises(ValueError, match="line 2"):
        parse_annotation("0,0,1,0,1,1\tA\n1,2,3\tB\n")
