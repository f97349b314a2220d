import math

import numpy as np
import pytest

from countadapt.errors import ConfigError
from countadapt.evaluation import (
    METRICS_CSV_HEADER, compare_domains, evaluate, format_report,
    metrics_from_pairs, report_csv_rows,
)
from countadapt.models import EstimatorConfig, init_params
from countadapt.data import SceneDomainParams, synth_dataset

TINY = EstimatorConfig(in_channels=3, depth=2, base_channels=2)


def test_worked_example():
    # truths [3, 7], predictions [3, 5]
    report = metrics_from_pairs([(3.0, 3.0), (7.0, 5.0)])
    assert report.mae == 1.0
    assert report.mse == 2.0
    assert math.isclose(report.are, (0 + 2 / 7) / 2, rel_tol=1e-12)


def test_perfect_predictions():
    report = metrics_from_pairs([(3.0, 3.0), (5.0, 5.0)])
    assert report.mae == report.mse == report.are == 0.0


def test_single_image_example():
    report = metrics_from_pairs([(4.0, 4.6)])
    assert math.isclose(report.mae, 0.6, rel_tol=1e-12)
    assert math.isclose(report.mse, 0.36, rel_tol=1e-12)
    assert math.isclose(report.are, 0.15, rel_tol=1e-12)


def test_zero_count_excluded_from_are_only():
    base = [(3.0, 4.0), (5.0, 5.0)]
    with_zero = base + [(0.0, 2.0)]
    a = metrics_from_pairs(base)
    b = metrics_from_pairs(with_zero)
    assert b.n_images == 3 and b.n_zero_count_excluded == 1
    assert b.are == a.are
    assert b.mae != a.mae and b.mse != a.mse


def test_all_zero_counts_are_undefined():
    report = metrics_from_pairs([(0.0, 1.0), (0.0, 0.5)])
    assert math.isnan(report.are)
    assert not report.are_defined
    assert "undefined" in format_report(report)


def test_rmse_is_derived():
    report = metrics_from_pairs([(0.0, 2.0)])
    assert report.mse == 4.0 and report.rmse == 2.0


def test_metrics_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        metrics_from_pairs([])


def test_oracle_equivalence_random_pairs():
    # independent reference: accumulate each metric with its own plain loop
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 20))
        truths = rng.integers(0, 15, size=n).astype(float)
        preds = truths + rng.normal(0, 2, size=n)
        report = metrics_from_pairs(list(zip(truths, preds)))

        abs_total = 0.0
        for t, p in zip(truths, preds):
            abs_total += abs(p - t)
        sq_total = 0.0
        for t, p in zip(truths, preds):
            sq_total += abs(p - t) ** 2
        rel_total, k = 0.0, 0
        for t, p in zip(truths, preds):
            if t > 0:
                rel_total += abs(p - t) / t
                k += 1
        assert report.mae == abs_total / n
        assert report.mse == sq_total / n
        if k:
            assert report.are == rel_total / k
        else:
            assert math.isnan(report.are)
        # sanity against numpy's (pairwise-summed) means
        assert math.isclose(report.mae, float(np.mean(np.abs(preds - truths))), rel_tol=1e-12)


def _dataset(n=3, seed=0):
    params = SceneDomainParams(object_count_range=(1, 4), width=32, height=32)
    return synth_dataset(params, n, rng_seed=seed)


def test_evaluate_deterministic_and_shapes():
    psi = init_params(TINY, rng_seed=0)
    data = _dataset()
    a = evaluate(psi, data)
    b = evaluate(psi, data)
    assert a.mae == b.mae and a.mse == b.mse
    assert a.n_images == 3
    assert len(a.per_image) == 3
    assert all(len(pair) == 2 for pair in a.per_image)


def test_evaluate_rejects_empty():
    psi = init_params(TINY, rng_seed=0)
    with pytest.raises(ConfigError):
        evaluate(psi, [])


def test_compare_domains_identical_sets_ratio_one():
    psi = init_params(TINY, rng_seed=1)
    data = _dataset()
    cmp = compare_domains(psi, data, data)
    for name, ratio in cmp.ratios.items():
        assert ratio == pytest.approx(1.0), name


def test_compare_domains_ratios_finite_positive():
    psi = init_params(TINY, rng_seed=2)
    cmp = compare_domains(psi, _dataset(seed=1), _dataset(seed=2))
    for ratio in cmp.ratios.values():
        assert np.isfinite(ratio) and ratio > 0


def test_csv_rows_have_header_fields():
    report = metrics_from_pairs([(3.0, 4.0)])
    rows = report_csv_rows("val", report)
    assert len(rows) == 4
    assert METRICS_CSV_HEADER.count(",") == rows[0].count(",")
    assert rows[0].startswith("val,mae,")
