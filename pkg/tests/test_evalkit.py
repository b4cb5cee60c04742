import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from trackinspect import DataError
from trackinspect.evalkit import (confusion_matrix, filter_by_severity, fp_per_mile, pd_at_fp_rate, roc,
                                  severity_from_masks, summary_json, summary_table, threshold_at_fp_rate,
                                  write_confusion_csv, write_roc_csv)


class TestRoc:
    def test_separated(self):
        c = roc([3, 4, 5, 0, 1, 2], [1, 1, 1, 0, 0, 0])
        assert c.auc == 1.0

    def test_hand_case(self):
        c = roc([0.9, 0.8, 0.8, 0.5, 0.3, 0.1], [1, 0, 1, 1, 0, 0])
        np.testing.assert_array_equal(c.tp, [0, 1, 2, 3, 3, 3])
        np.testing.assert_array_equal(c.fp, [0, 0, 1, 1, 2, 3])
        np.testing.assert_array_equal(c.thresholds[1:], [0.9, 0.8, 0.5, 0.3, 0.1])
        assert c.auc == 15 / 18

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(0)
        c = roc(rng.normal(size=200), rng.integers(0, 2, 200))
        assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0, 0, 1, 1)
        assert np.all(np.diff(c.tpr) >= 0) and np.all(np.diff(c.fpr) >= 0)

    def test_random_labels(self):
        rng = np.random.default_rng(1)
        c = roc(rng.normal(size=100_000), rng.integers(0, 2, 100_000))
        assert abs(c.auc - 0.5) <= 0.01

    def test_mann_whitney(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            n = int(rng.integers(2, 60))
            s = rng.integers(0, 8, n).astype(float)  # many ties
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            u = mannwhitneyu(s[y == 1], s[y == 0]).statistic
            assert roc(s, y).auc == u / (y.sum() * (n - y.sum()))

    def test_monotone_transform(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=300)
        y = rng.integers(0, 2, 300)
        a, b = roc(s, y), roc(np.exp(3 * s) + 2, y)
        np.testing.assert_array_equal(a.tp, b.tp)
        np.testing.assert_array_equal(a.fp, b.fp)

    def test_errors(self):
        with pytest.raises(DataError):
            roc([1, 2], [1, 1])
        with pytest.raises(DataError):
            roc([1, np.nan], [0, 1])


class TestOperatingPoint:
    def test_fp_per_mile(self):
        assert fp_per_mile(0.001) == 10
        assert fp_per_mile(0) == 0
        assert fp_per_mile(0.0002) == pytest.approx(2)

    def test_beyond_curve(self):
        c = roc([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1])
        assert pd_at_fp_rate(c, 1e9) == 1.0

    def test_zero_target(self):
        c = roc([0.9, 0.1, 0.5, 0.2], [0, 1, 1, 0])
        assert pd_at_fp_rate(c, 0) == 0.0

    def test_matches_threshold_scan(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, 4000).astype(bool)
        s = rng.normal(size=y.size) + 2 * y
        c = roc(s, y)
        for target in (2.5, 10, 50, 1000):
            best = 0.0
            for t in np.unique(s):
                flagged = s >= t
                if flagged[~y].mean() * 1e4 <= target + 1e-9:
                    best = max(best, flagged[y].mean())
            assert pd_at_fp_rate(c, target) == pytest.approx(best, abs=1e-12)
            t = threshold_at_fp_rate(c, target)
            if np.isfinite(t):
                assert np.mean(s[~y] >= t) * 1e4 <= target + 1e-9


class TestConfusion:
    def test_diagonal(self):
        m, acc = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert acc == 1 and np.array_equal(m, np.diag([1, 1, 2]))

    def test_constant_predictor(self):
        m, _ = confusion_matrix([1] * 5, [0, 1, 2, 0, 1], 3)
        assert np.count_nonzero(m.sum(axis=0)) == 1 and m[:, 1].sum() == 5

    def test_hand_count(self):
        m, acc = confusion_matrix([0, 2, 1, 1, 0, 2], [0, 1, 1, 2, 0, 2], 3)
        assert m.tolist() == [[2, 0, 0], [0, 1, 1], [0, 1, 1]]
        assert acc == 4 / 6

    def test_out_of_range(self):
        with pytest.raises(DataError):
            confusion_matrix([3], [0], 3)


class TestSeverity:
    def test_mask_ratio(self):
        ins = np.zeros((10, 10), bool)
        ins[:, :5] = True
        d = np.zeros((10, 10), bool)
        d[:2, :] = True
        assert severity_from_masks(d, ins) == 10 / 50
        with pytest.raises(DataError):
            severity_from_masks(d, np.zeros_like(ins))

    def test_levels(self):
        # columns: crumbling, chipped
        sev = np.array([[0.0, 0.0], [0.05, 0.0], [0.1, 0.0], [0.3, 0.2], [0.0, 0.4], [1.0, 0.0]])
        s0 = filter_by_severity(sev, 0, 0.0)
        assert s0.positive.tolist() == [False, True, True, True, False, True]
        assert s0.include.tolist() == [True, True, True, True, False, True]
        s1 = filter_by_severity(sev, 0, 0.1)
        assert s1.include.tolist() == [True, False, True, True, False, True]
        assert s1.labels().tolist() == [False, True, True, True]
        s2 = filter_by_severity(sev, 0, 1.0)
        assert s2.positive.tolist() == [False] * 5 + [True]

    def test_monotone(self):
        rng = np.random.default_rng(5)
        sev = rng.uniform(size=(200, 2)) * (rng.uniform(size=(200, 2)) < 0.3)
        prev = None
        for level in np.linspace(0, 1, 11):
            pos = filter_by_severity(sev, 1, level).positive
            if prev is not None:
                assert not np.any(pos & ~prev)
            prev = pos


class TestOutputs:
    def test_csv(self, tmp_path):
        c = roc([0.9, 0.1, 0.5], [1, 0, 0])
        write_roc_csv(tmp_path / "roc.csv", c)
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0].startswith("threshold,fpr,tpr") and len(lines) == 5
        write_confusion_csv(tmp_path / "cm.csv", np.eye(2, dtype=int), ["a", "b"])
        assert (tmp_path / "cm.csv").read_text().splitlines()[1] == "a,1,0"

    def test_summary(self):
        rows = [{"condition": "crumbling", "fp_per_mile": 10, "mtl": 0.8942, "stl": 0.85}]
        text = summary_table(rows)
        assert "89.42%" in text and text.splitlines()[0].split()[0] == "condition"
        assert '"condition": "crumbling"' in summary_json(rows)
