import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcount.evaluator import (CSV_FIELDS, EvalResult, EvaluationError, aggregate, emit_report, evaluate, mae,
                                  markdown_table, predict, read_csv, rmse, write_csv)
from microcount.models import Module, build_backbone, toy_config
from microcount.tensor import ops


def brute_mae(p, t):
    return sum(abs(a - b) for a, b in zip(p, t)) / len(p)


def brute_rmse(p, t):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(p))


def test_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([2, 2, 5], [1, 2, 3]) == 1.0
    assert rmse([2, 2, 5], [1, 2, 3]) == pytest.approx(math.sqrt(5 / 3), abs=1e-12)


def test_length_errors():
    for fn in (mae, rmse):
        with pytest.raises(ValueError):
            fn([1, 2], [1])
        with pytest.raises(ValueError):
            fn([], [])


def test_brute_force_oracle_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 20))
        p = rng.normal(scale=rng.uniform(0.1, 500), size=n).tolist()
        t = rng.integers(0, 1855, size=n).tolist()
        m, r = mae(p, t), rmse(p, t)
        assert abs(m - brute_mae(p, t)) <= 1e-9 * max(1.0, m)
        assert abs(r - brute_rmse(p, t)) <= 1e-9 * max(1.0, r)
        assert r >= m - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=30))
def test_rmse_dominates_mae(pairs):
    p, t = zip(*pairs)
    assert rmse(p, t) >= mae(p, t) * (1 - 1e-12) - 1e-12


class Oracle(Module):
    """Reads the label planted in the first pixel."""

    def __init__(self, scale=1.0):
        self.scale = scale

    def forward(self, images):
        return ops.reshape(images[:, 0, 0, 0], (images.shape[0],)) * self.scale

    def flops(self, shape, fpm=1.0):
        return 0, (shape[0],)


def _planted(counts, size=8):
    x = np.zeros((len(counts), 3, size, size), np.float32)
    x[:, 0, 0, 0] = counts
    return x


def test_oracle_model_scores_zero_and_constant_scores_mean():
    counts = np.array([0.0, 3, 7, 10, 2])
    res = evaluate(Oracle(), _planted(counts), counts, name="oracle")
    assert res.mae == 0.0 and res.rmse == 0.0 and res.mae_rounded == 0.0
    zero = evaluate(Oracle(0.0), _planted(counts), counts)
    assert zero.mae == pytest.approx(counts.mean())
    assert zero.rmse == pytest.approx(math.sqrt(np.mean(counts ** 2)))


def test_predict_independent_of_batch_size_and_restores_mode():
    model = build_backbone(toy_config("vit", input_size=16, depth=1, dim=16, heads=2), seed=0)
    x = np.random.default_rng(1).normal(size=(7, 3, 16, 16)).astype(np.float32)
    model.train()
    a = predict(model, x, batch_size=1)
    b = predict(model, x, batch_size=7)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    assert model.training


def test_evaluate_reports_model_accounting():
    model = build_backbone(toy_config("cnn", input_size=16, depth=2, dim=16), seed=0)
    x = np.zeros((3, 3, 16, 16), np.float32)
    res = evaluate(model, x, np.ones(3), name="cnn-toy", dataset="toy", seed=2)
    assert res.params == model.num_parameters()
    assert res.flops == model.flops((1, 3, 16, 16))[0] > 0
    assert res.ms_per_image > 0 and res.seed == 2


def test_evaluate_empty_raises():
    with pytest.raises(EvaluationError):
        evaluate(Oracle(), np.zeros((0, 3, 8, 8), np.float32), np.zeros(0), skipped=[("a.png", "bad")])


def _result(model="vit-vanilla", dataset="fnc", mae_=1.0, rmse_=2.0, seed=0, variant=""):
    return EvalResult(model, variant, dataset, mae_, rmse_, 1.2839e10, 87_500_000, 3.5, seed, mae_)


def test_csv_round_trip(tmp_path):
    rows = [_result(mae_=0.1 + 0.2, rmse_=1 / 3), _result("cnn-base", "vgg", 5.0, 7.0, seed=1)]
    path = write_csv(tmp_path / "r.csv", rows)
    assert path.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    back = read_csv(path)
    assert [r.row() for r in back] == [r.row() for r in rows]
    write_csv(tmp_path / "r2.csv", rows, rounded=True)
    assert [r.mae_rounded for r in read_csv(tmp_path / "r2.csv")] == [r.mae_rounded for r in rows]


def test_aggregate_means_over_seeds():
    rows = [_result(mae_=1.0, rmse_=2.0, seed=0), _result(mae_=3.0, rmse_=4.0, seed=1)]
    (agg,) = aggregate(rows)
    assert agg.mae == 2.0 and agg.rmse == 3.0 and agg.seed == "mean"


def test_single_row_table():
    table = markdown_table([_result()])
    lines = table.strip().splitlines()
    assert lines[0] == "| Model | fnc MAE | fnc RMSE | FLOPs (1e8) | Params (1e6) |"
    assert any(line.startswith("| Vanilla ViT |") for line in lines)
    assert "**1.00**" in table and "<u>" not in table


def test_best_and_second_marks_ties_to_earlier_row():
    rows = [_result("cnn-base", mae_=2.0, rmse_=3.0), _result("cnn-medium", mae_=1.0, rmse_=3.0),
            _result("vit-vanilla", mae_=1.0, rmse_=5.0)]
    lines = markdown_table(rows).splitlines()
    body = {line.split("|")[1].strip(): line for line in lines if line.startswith("| ") and "*" not in
            line.split("|")[1]}
    assert "**1.00**" in body["CNN Medium"] and "<u>1.00</u>" in body["Vanilla ViT"]
    assert "**3.00**" in body["CNN Base"] and "<u>3.00</u>" in body["CNN Medium"]


def test_table_groups_in_order():
    rows = [_result("vit-vanilla"), _result("transcrowd-t"), _result("cnn-base"), _result("custom")]
    text = markdown_table(rows)
    order = [text.index(s) for s in ("*Traditional", "*State of the art", "*ViT backbones", "*Other")]
    assert order == sorted(order)


def test_emit_report(tmp_path):
    rows = [_result(seed=0), _result(seed=1, mae_=2.0)]
    paths = emit_report(rows, tmp_path)
    back = read_csv(paths["csv"])
    assert len(back) == 3 and back[-1].seed == "mean" and back[-1].mae == 1.5
    assert paths["markdown"].read_text().startswith("| Model |")
    with pytest.raises(EvaluationError):
        emit_report([], tmp_path)
