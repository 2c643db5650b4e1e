import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from adgen.data import DomainDataset, ImageSample
from adgen.errors import EvaluationError, ShapeError
from adgen.evaluation import (
    DomainDistanceTable,
    auroc,
    domain_distance_table,
    evaluate_target,
    fid,
    plot_sweep,
    pooled_features,
    sweep_reference_fraction,
    write_sweep_csv,
)


labelled = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6).map(lambda k: k / 4), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
    )
)


class TestAUROC:
    def test_hand_values(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
        assert auroc([0.5, 0.5], [0, 1]) == 0.5
        assert auroc([0, 1], [0, 1]) == 1.0
        assert auroc([1, 0], [0, 1]) == 0.0

    @given(labelled)
    def test_matches_pair_counting(self, data):
        s, y = data
        assert auroc(s, y) == oracles.auroc_pairs(s, y)

    @given(labelled)
    def test_label_complement(self, data):
        s, y = data
        assert auroc(s, y) + auroc(s, [1 - v for v in y]) == 1.0

    @given(labelled, st.floats(0.1, 10), st.floats(-5, 5))
    def test_monotone_invariance(self, data, a, b):
        s, y = data
        assert auroc(s, y) == auroc([a * v + b for v in s], y)

    @pytest.mark.parametrize(
        "scores,labels",
        [([0.1, 0.2], [1, 1]), ([0.1, 0.2], [0, 0]), ([0.1], [0, 1]), ([0.1, 0.2], [0, 2]), ([np.nan, 0.2], [0, 1])],
    )
    def test_invalid(self, scores, labels):
        with pytest.raises(EvaluationError):
            auroc(scores, labels)


class TestFID:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(200, 5))
        assert fid(x, x) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(300, 4)), rng.normal(1.0, 2.0, size=(250, 4))
        assert abs(fid(a, b) - fid(b, a)) < 1e-6

    def test_known_gaussians(self):
        rng = np.random.default_rng(2)
        n, d = 20_000, 3
        a = rng.normal(size=(n, d))
        b = rng.normal(size=(n, d)) * 2.0 + 1.0
        # |mu|^2 + tr(I + 4I - 2*2I) = 3 + 3
        assert fid(a, b) == pytest.approx(6.0, rel=0.05)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            fid(np.zeros((5, 2)), np.zeros((5, 3)))

    def test_singular_warns(self):
        rng = np.random.default_rng(3)
        with pytest.warns(UserWarning, match="singular"):
            value = fid(rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
        assert math.isfinite(value) and value >= 0

    def test_table_layout(self):
        m = np.array([[0, 1.0, 3.0], [1.0, 0, 2.0], [3.0, 2.0, 0]])
        table = DomainDistanceTable(["a", "b", "c"], m)
        assert table.averages == {"a": 2.0, "b": 1.5, "c": 2.5}
        lines = table.format().splitlines()
        assert len(lines) == 4 and "average" in lines[0]
        assert json.loads(json.dumps(table.to_dict()))["averages"]["c"] == 2.5

    def test_domain_table(self, tiny_model, tiny_domains):
        table = domain_distance_table(tiny_domains, lambda imgs: pooled_features(imgs, tiny_model))
        assert np.allclose(table.matrix, table.matrix.T)
        assert np.all(np.diag(table.matrix) == 0) and np.all(table.matrix >= 0)

    def test_domain_table_needs_two(self, tiny_model, tiny_domains):
        with pytest.raises(EvaluationError):
            domain_distance_table(tiny_domains[:1], lambda imgs: pooled_features(imgs, tiny_model))


class TestTargetEvaluation:
    def test_report(self, tiny_model, tiny_domains, tmp_path):
        target = tiny_domains[0]
        report = evaluate_target(tiny_model, target, 1.0, seed=0)
        assert 0.0 <= report.image_auc <= 1.0 and 0.0 <= report.pixel_auc <= 1.0
        assert len(report.per_image) == len(target.test_pool())
        assert set(report.bank_ids) == {s.path for s in target.reference_pool()}
        assert not set(report.bank_ids) & {r["path"] for r in report.per_image}
        saved = json.loads(report.save(tmp_path / "r.json").read_text())
        assert saved["target_domain"] == target.domain

    def test_pixel_auc_none_without_masks(self, tiny_model, tiny_domains):
        d = tiny_domains[0]
        abnormal = [ImageSample(s.pixels, 1, d.domain, None, s.path, "test") for s in d.abnormal]
        report = evaluate_target(tiny_model, DomainDataset(d.domain, d.normal, abnormal))
        assert report.pixel_auc is None

    def test_missing_classes(self, tiny_model, tiny_domains):
        d = tiny_domains[0]
        with pytest.raises(EvaluationError, match="abnormal"):
            evaluate_target(tiny_model, DomainDataset(d.domain, d.normal, ()))
        train_only = [ImageSample(s.pixels, 0, d.domain, None, s.path, "train") for s in d.normal]
        with pytest.raises(EvaluationError, match="normal test"):
            evaluate_target(tiny_model, DomainDataset(d.domain, train_only, d.abnormal))

    def test_sweep(self, tiny_model, tiny_domains, tmp_path):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rows = sweep_reference_fraction(tiny_model, tiny_domains[1], [0.2, 1.0, 1.0], seeds=[0, 1])
        assert any("duplicate" in str(w.message) for w in caught)
        assert [r["fraction"] for r in rows] == [0.2, 1.0]
        assert [r["n_reference"] for r in rows] == [1, 5]
        full = evaluate_target(tiny_model, tiny_domains[1], 1.0, seed=5)
        assert rows[1]["image_auc"] == pytest.approx(full.image_auc)
        csv_text = write_sweep_csv(rows, tmp_path / "s.csv").read_text()
        assert csv_text.splitlines()[0] == "fraction,n_reference,image_auc,pixel_auc,n_seeds"
        assert plot_sweep(rows, tmp_path / "s.png").stat().st_size > 0
