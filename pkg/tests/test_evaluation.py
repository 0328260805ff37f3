import string

import numpy as np
import pytest

from deer.data import DatasetConfig, TextInstance, generate_dataset
from deer.evaluation import (
    DEFAULT_BETAS,
    EvalConfig,
    SpottingResult,
    detection_prf,
    e2e_counts,
    e2e_fscore,
    edit_distance,
    evaluate,
    format_beta_csv,
    ic15_filter,
    lexicon_correct,
    match_detections,
    prf,
    run_beta_ablation,
    spot,
)
from deer.geometry import Polygon, polygon_iou
from deer.model import DEER, ModelConfig

from oracles import best_assignment_matches, edit_distance_recursive

TINY = dict(d_model=16, num_heads=2, num_points=2, ffn_dim=16, enc_layers=1, dec_layers=2,
            backbone_channels=(4, 8, 8, 8))
SMALL_DATA = DatasetConfig(image_size=(64, 64), scale_range=(1.0, 1.4), max_len=4)


def rect(x0, y0, x1, y1):
    return Polygon([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def pred(poly, text="", conf=1.0):
    return SpottingResult(poly, text, conf, np.zeros(2))


A, B = rect(0, 0, 10, 10), rect(20, 0, 30, 10)


def test_identical_predictions_match_fully():
    m = match_detections([A, B], [B, A])
    assert detection_prf(m) == (1.0, 1.0, 1.0)
    assert all(iou >= 0.5 for _, _, iou in m.pairs)


def test_half_overlapping_predictions():
    m = match_detections([A, B], [A, rect(50, 50, 60, 60)])
    assert detection_prf(m) == (0.5, 0.5, 0.5)


def test_prf_edge_cases():
    assert detection_prf(match_detections([A], [])) == (0.0, 0.0, 0.0)
    assert prf(1, 2, 1) == pytest.approx((0.5, 1.0, 2 / 3))
    assert prf(0, 0, 0) == (0.0, 0.0, 0.0)


def test_ignored_ground_truth_is_not_scored():
    m = match_detections([A, B], [A, B], gt_ignore=[False, True])
    assert (m.n_gt, m.n_pred, len(m.pairs)) == (1, 1, 1)


def test_greedy_matching_close_to_optimal_assignment():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n, k = rng.integers(1, 7, size=2)
        gts = [rect(x, y, x + w, y + h) for x, y, w, h in
               zip(rng.uniform(0, 30, n), rng.uniform(0, 30, n), rng.uniform(4, 14, n), rng.uniform(4, 14, n))]
        preds = [Polygon(g.vertices + rng.normal(0, 3, size=2)) for g in gts[:k]]
        preds += [rect(x, y, x + 8, y + 8) for x, y in rng.uniform(0, 30, size=(max(k - n, 0), 2))]
        iou = np.array([[polygon_iou(g, p) for p in preds] for g in gts])
        greedy = detection_prf(match_detections(gts, preds))[2]
        best = prf(best_assignment_matches(iou, 0.5), len(gts), len(preds))[2]
        worst = max(worst, best - greedy)
    assert worst <= 0.02


def test_edit_distance_classic_and_oracle():
    assert edit_distance("kitten", "sitting") == 3
    rng = np.random.default_rng(1)
    letters = list("ABCD")
    for _ in range(200):
        a = "".join(rng.choice(letters, size=rng.integers(0, 7)))
        b = "".join(rng.choice(letters, size=rng.integers(0, 7)))
        assert edit_distance(a, b) == edit_distance_recursive(a, b)


def test_lexicon_correction():
    assert lexicon_correct("CVT", ["CAT", "DOG"]) == "CAT"
    assert lexicon_correct("dog", ["CAT", "DOG"]) == "DOG"
    assert lexicon_correct("AB", ["AC", "AD"]) == "AC"
    with pytest.raises(ValueError):
        lexicon_correct("X", [])


def test_lexicon_choice_matches_oracle():
    rng = np.random.default_rng(2)
    letters = list(string.ascii_uppercase[:5])
    lexicon = ["".join(rng.choice(letters, size=rng.integers(2, 6))) for _ in range(15)]
    for _ in range(100):
        w = "".join(rng.choice(letters, size=rng.integers(1, 6)))
        expect = min(lexicon, key=lambda e: (edit_distance_recursive(w.lower(), e.lower()), e))
        got = lexicon_correct(w, lexicon)
        assert got == expect and got in lexicon


@pytest.mark.parametrize("word,out,ignored", [
    ("'word.", "word", False),
    ("ab", "ab", True),
    ("hello", "hello", False),
    ("(x)", "x", True),
])
def test_ic15_filter(word, out, ignored):
    assert ic15_filter(word) == (out, ignored)


def test_ic15_filter_is_idempotent():
    for w in ["'word.", "..a.b..", "##", "a", "x-y!", "", "!!abc"]:
        once = ic15_filter(w)[0]
        assert ic15_filter(once)[0] == once


def test_e2e_scoring_rules():
    gts = [TextInstance(A, "CAT"), TextInstance(B, "DOG")]
    assert e2e_fscore(gts, [pred(A, "cat"), pred(B, "DOG")]) == 1.0
    assert e2e_fscore(gts, [pred(A, "X"), pred(B, "Y")]) == 0.0
    assert e2e_counts(gts, [pred(A, "CVT")], ["CAT", "DOG"]) == (1, 2, 1)
    assert e2e_counts(gts, [pred(A, "CVT")]) == (0, 2, 1)
    strict = EvalConfig(case_sensitive=True)
    assert e2e_counts(gts, [pred(A, "cat")], cfg=strict)[0] == 0


def test_e2e_ic15_rules_ignore_short_words():
    gts = [TextInstance(A, "AB"), TextInstance(B, "DOG.")]
    tp, n_gt, n_pred = e2e_counts(gts, [pred(A, "AB"), pred(B, "'DOG")], cfg=EvalConfig(ic15_rules=True))
    assert (tp, n_gt, n_pred) == (1, 1, 1)


@pytest.fixture(scope="module")
def small():
    model = DEER(ModelConfig(**TINY))
    data = generate_dataset(77, 4, SMALL_DATA)
    return model, data


def test_zeroed_probability_head_gives_no_detections(small):
    model, data = small
    model = DEER(ModelConfig(**TINY))
    model.location_head.prob.out.bias.data[...] = -60.0
    cfg = EvalConfig(long_side=64)
    assert spot(model, data[0].image, cfg) == []
    report = evaluate(model, data, cfg)
    assert report.get("detection", "f_measure") == 0.0
    assert report.get("e2e_none", "f_measure") == 0.0


def test_beta_zero_equals_plain_gt_point_evaluation(small):
    model, data = small
    cfg = EvalConfig(long_side=64, gt_points=True)
    plain = evaluate(model, data, cfg)
    curve = run_beta_ablation(model, data, DEFAULT_BETAS, EvalConfig(long_side=64))
    assert list(curve) == list(DEFAULT_BETAS)
    assert curve[0.0] == plain.get("e2e_none", "f_measure")
    assert plain.get("detection", "f_measure") == 1.0
    assert format_beta_csv(curve).splitlines()[0] == "beta,e2e_f"


def test_evaluation_is_reproducible(small):
    model, data = small
    cfg = EvalConfig(long_side=64, min_score=0.0, prob_threshold=0.1)
    a = evaluate(model, data, cfg, lexicon=["CAT", "TEN"]).format()
    b = evaluate(model, data, cfg, lexicon=["CAT", "TEN"]).format()
    assert a == b
    assert "[e2e_full]" in a and "[protocol]" in a


def test_lexicon_never_changes_detection_numbers(small):
    model, data = small
    cfg = EvalConfig(long_side=64, min_score=0.0, prob_threshold=0.1)
    a = evaluate(model, data, cfg)
    b = evaluate(model, data, cfg, lexicon=["ACE", "TAX"])
    assert a.sections["detection"] == b.sections["detection"]
