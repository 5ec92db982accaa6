import numpy as np
import pytest

from grcsf.errors import ConfigurationError, ValidationError
from grcsf.metrics import METRIC_NAMES, calcium_postprocess, calcium_score_eval, compute_metrics
from oracles import bfs_components, counting_oracle


class TestComputeMetrics:
    def test_perfect(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:4, 3:6] = 1
        r = compute_metrics(gt, gt.copy())
        assert (r.dice, r.iou, r.precision, r.recall, r.fpr, r.vose) == (1, 1, 1, 1, 0, 0)

    def test_empty_prediction(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[1, 1] = 1
        r = compute_metrics(np.zeros_like(gt), gt)
        assert r.dice == 0 and r.recall == 0 and r.fpr == 0

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = (rng.random((8, 8)) < rng.uniform(0, 0.6)).astype(np.uint8)
            gt = (rng.random((8, 8)) < rng.uniform(0, 0.6)).astype(np.uint8)
            r = compute_metrics(pred, gt)
            expected = counting_oracle(pred, gt)
            for k in METRIC_NAMES:
                assert getattr(r, k) == expected[k], k

    def test_dice_identities(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = (rng.random((8, 8)) < 0.3).astype(np.uint8)
            b = (rng.random((8, 8)) < 0.3).astype(np.uint8)
            r = compute_metrics(a, b)
            assert r.dice == compute_metrics(b, a).dice
            if r.precision + r.recall > 0:
                assert r.dice == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall), abs=1e-9)

    def test_per_patient_grouping_and_mean(self):
        rng = np.random.default_rng(2)
        pred = (rng.random((6, 8, 8)) < 0.3).astype(np.uint8)
        gt = (rng.random((6, 8, 8)) < 0.3).astype(np.uint8)
        pids = ["a", "a", "b", "b", "b", "c"]
        r = compute_metrics(pred, gt, pids)
        assert sorted(r.per_patient) == ["a", "b", "c"]
        # pooled counts per patient, then an unweighted mean
        pooled_b = counting_oracle(pred[2:5].reshape(-1, 8), gt[2:5].reshape(-1, 8))
        assert r.per_patient["b"]["dice"] == pooled_b["dice"]
        assert r.dice == pytest.approx(np.mean([r.per_patient[p]["dice"] for p in "abc"]))

    def test_ranges(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            r = compute_metrics((rng.random((8, 8)) < 0.5), (rng.random((8, 8)) < 0.1))
            for k in ("dice", "iou", "precision", "recall", "fpr"):
                assert 0 <= getattr(r, k) <= 1
            assert r.vose >= 0

    def test_errors(self):
        with pytest.raises(ValidationError):
            compute_metrics(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ConfigurationError):
            compute_metrics(np.zeros((0, 4, 4)), np.zeros((0, 4, 4)), [])

    def test_csv_has_row_per_patient(self):
        r = compute_metrics(np.ones((2, 4, 4)), np.ones((2, 4, 4)), ["x", "y"])
        lines = r.to_csv().strip().splitlines()
        assert lines[0].startswith("patient_id,dice") and len(lines) == 3


class TestCalciumPostprocess:
    def test_diagonal_neighbours_are_separate(self):
        mask = np.zeros((1, 3, 3), dtype=bool)
        mask[0, 0, 0] = mask[0, 1, 1] = True
        labels = calcium_postprocess(mask, np.full(mask.shape, 500.0))
        assert labels.max() == 2

    def test_strict_threshold(self):
        mask = np.ones((1, 1, 2), dtype=bool)
        hu = np.array([[[130.0, 130.5]]])
        labels = calcium_postprocess(mask, hu)
        assert labels[0, 0, 0] == 0 and labels[0, 0, 1] == 1

    def test_matches_bfs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mask = rng.random((4, 8, 8)) < 0.45
            hu = rng.uniform(60, 200, size=(4, 8, 8))
            hu[rng.random(hu.shape) < 0.05] = 130.0
            assert np.array_equal(calcium_postprocess(mask, hu), bfs_components(mask, hu))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            calcium_postprocess(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestCalciumScore:
    def test_perfect(self):
        mask = np.zeros((2, 6, 6), dtype=bool)
        mask[0, 1:3, 1:3] = mask[1, 4, 4] = True
        labels = calcium_postprocess(mask, np.full(mask.shape, 400.0))
        r = calcium_score_eval(labels, labels)
        assert r.f1_vol == r.sens_lesion == r.ppv_lesion == 1.0

    def test_empty_prediction(self):
        gt = np.zeros((1, 4, 4), dtype=int)
        gt[0, 1, 1] = 1
        r = calcium_score_eval(np.zeros_like(gt), gt)
        assert r.sens_vol == 0 and r.sens_lesion == 0

    def test_crafted_volume(self):
        hu = np.full((2, 8, 8), 300.0)
        gt = np.zeros((2, 8, 8), dtype=bool)
        gt[0, 0:2, 0:2] = True  # 4 voxels
        gt[1, 5:8, 5:8] = True  # 9 voxels
        pred = np.zeros_like(gt)
        pred[0, 0:2, 0:2] = True  # covers the first lesion
        pred[1, 0:2, 5:7] = True  # 4 false-positive voxels
        r = calcium_score_eval(calcium_postprocess(pred, hu), calcium_postprocess(gt, hu), voxel_volume=0.5)
        assert r.components_gt == 2 and r.components_pred == 2
        assert r.sens_lesion == 0.5 and r.ppv_lesion == 0.5
        assert r.tp_volume == 2.0 and r.gt_volume == 6.5 and r.pred_volume == 4.0
        assert r.sens_vol == pytest.approx(4 / 13) and r.ppv_vol == pytest.approx(0.5)
        assert r.f1_vol == pytest.approx(2 * (4 / 13) * 0.5 / (4 / 13 + 0.5))
