import numpy as np
import pytest

from songgen.errors import InvalidInput
from songgen.melody import MidiSequence, transpose
from songgen.metrics import (
    MetricReport,
    NullScorer,
    SamplePair,
    apd,
    distribution_similarity,
    evaluate_corpus,
    ffe,
    melody_distance,
    td,
)


def seq(pairs):
    return MidiSequence.from_pairs(pairs)


class TestApdTd:
    def test_identical_zero(self):
        m = seq([(60, 3), (64, 2)])
        assert apd(m, m) == 0.0
        assert td(m, m) == 0.0

    def test_apd_arithmetic(self):
        assert apd(seq([(60, 1)]), seq([(62, 1), (63, 1)])) == 2.5

    def test_apd_transpose(self):
        m = seq([(60, 2), (67, 3)])
        assert apd(m, transpose(m, 3)) == pytest.approx(3.0)

    def test_td_arithmetic(self):
        assert td(seq([(60, 500)]), seq([(60, 610)])) == pytest.approx(2.2)

    def test_td_symmetric(self):
        a, b = seq([(60, 130)]), seq([(60, 70)])
        assert td(a, b) == td(b, a)


class TestDistributionSimilarity:
    def test_identical_is_100(self):
        m = seq([(60, 3), (64, 7), (60, 3)])
        assert distribution_similarity(m, m, "pitch") == pytest.approx(100.0)
        assert distribution_similarity(m, m, "duration") == pytest.approx(100.0)

    def test_disjoint_is_0(self):
        assert distribution_similarity(seq([(40, 1)]), seq([(70, 1)]), "pitch") == 0.0

    def test_half_overlap(self):
        # {A:.5, B:.5} vs {A:.5, C:.5} -> intersection 50%
        gt = seq([(60, 1), (62, 1)])
        pred = seq([(60, 1), (64, 1)])
        assert distribution_similarity(gt, pred, "pitch") == pytest.approx(50.0)

    def test_permutation_invariant(self):
        gt = seq([(60, 2), (64, 3), (67, 1)])
        pred = seq([(67, 1), (60, 2), (64, 3)])
        assert distribution_similarity(gt, pred, "pitch") == pytest.approx(100.0)
        assert distribution_similarity(gt, pred, "duration") == pytest.approx(100.0)

    def test_unknown_attr(self):
        with pytest.raises(InvalidInput):
            distribution_similarity(seq([(60, 1)]), seq([(60, 1)]), "velocity")


class TestMelodyDistance:
    def test_identical_zero(self):
        m = seq([(60, 3), (62, 2)])
        assert melody_distance(m, m) == 0.0

    def test_single_cell(self):
        assert melody_distance(seq([(60, 1)]), seq([(61, 1)])) == pytest.approx(1.0)

    def test_hand_computed_alignment(self):
        # [60,60,62] vs [60,62,62]: path (1,1)(2,1)(3,2)(3,3) has zero cost
        assert melody_distance(seq([(60, 2), (62, 1)]), seq([(60, 1), (62, 2)])) == 0.0

    def test_integer_time_stretch_invariant(self):
        a = seq([(60, 2), (64, 3), (62, 1)])
        b = seq([(60, 4), (64, 6), (62, 2)])
        assert melody_distance(a, b) == melody_distance(a, a) == 0.0

    def test_symmetric(self):
        a, b = seq([(60, 2), (64, 3)]), seq([(61, 4), (70, 1)])
        assert melody_distance(a, b) == pytest.approx(melody_distance(b, a))


class TestFFE:
    def test_identical_zero(self):
        f0 = [220.0, 230.0, 240.0]
        v = [True, True, False]
        assert ffe(f0, v, f0, v) == 0.0

    def test_all_voicing_flipped(self):
        f0 = [220.0] * 4
        assert ffe(f0, [True] * 4, f0, [False] * 4) == 1.0

    def test_one_bad_frame_of_ten(self):
        gt = [200.0] * 10
        pred = [200.0] * 9 + [260.0]  # 30% error on the last frame
        assert ffe(gt, [True] * 10, pred, [True] * 10) == pytest.approx(0.1)

    def test_scale_invariant(self):
        rng = np.random.default_rng(0)
        gt = 200 + rng.random(50) * 100
        pred = gt * (1 + rng.normal(0, 0.1, 50))
        v = np.ones(50, bool)
        assert ffe(gt, v, pred, v) == ffe(gt * 3.7, v, pred * 3.7, v)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInput):
            ffe([220.0], [True], [220.0, 220.0], [True, True])


class TestEvaluateCorpus:
    def test_gt_vs_gt_perfect(self):
        m = seq([(60, 2), (64, 1), (67, 1), (72, 2)])
        f0 = np.full(6, 300.0)
        v = np.ones(6, bool)
        pair = SamplePair(m, m, gt_key=(0, "major"), gt_f0=f0, gt_voicing=v, pred_f0=f0, pred_voicing=v)
        rep = evaluate_corpus([pair])
        assert rep.aggregates["KA"] == pytest.approx(1.0)
        assert rep.aggregates["APD"] == 0.0
        assert rep.aggregates["TD"] == 0.0
        assert rep.aggregates["MD"] == 0.0
        assert rep.aggregates["PD"] == pytest.approx(100.0)
        assert rep.aggregates["DD"] == pytest.approx(100.0)
        assert rep.aggregates["FFE"] == 0.0
        assert rep.excluded["KA_undefined"] == 0

    def test_rounded_idempotent_on_grid_data(self):
        m = seq([(60, 25), (64, 50)])  # already on the 120 bpm 1/16 grid
        pair = SamplePair(m, m, tempo_bpm=120.0)
        plain = evaluate_corpus([pair], rounded=False)
        rounded = evaluate_corpus([pair], rounded=True)
        assert plain.aggregates["DD"] == rounded.aggregates["DD"] == pytest.approx(100.0)

    def test_ka_exclusion_counted(self):
        counts = [5, 1, 3, 2, 2, 4, 0, 0, 6, 3, 5, 5]  # orthogonal to C-major template
        bad = seq([(48 + pc, c) for pc, c in enumerate(counts) if c > 0])
        good = seq([(60, 2), (64, 1), (67, 1)])
        rep = evaluate_corpus([
            SamplePair(bad, bad, gt_key=(0, "major")),
            SamplePair(good, good, gt_key=(0, "major")),
        ])
        assert rep.excluded["KA_undefined"] == 1
        assert rep.aggregates["KA"] == pytest.approx(1.0)

    def test_report_serialization(self):
        m = seq([(60, 2)])
        rep = evaluate_corpus([SamplePair(m, m)])
        assert "APD" in rep.to_json()
        assert "APD" in rep.to_table()

    def test_null_scorer(self):
        assert NullScorer().score([], []) == {}

    def test_empty_corpus(self):
        with pytest.raises(InvalidInput):
            evaluate_corpus([])
