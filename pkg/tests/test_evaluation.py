import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from urbanst.dataset import SpatioTemporalTensor
from urbanst.errors import EvalError, ImputeError
from urbanst.evaluation import (
    HistoricalAverage,
    MeanImputer,
    ProtocolSpec,
    baseline_ha,
    baseline_knn_impute,
    baseline_mean_impute,
    compute_metrics,
    forecast_windows,
    format_table,
    run_protocol,
    write_reports_csv,
)
from urbanst.graph import AdjacencyMatrix
from urbanst.masks import block_missing_mask, point_missing_mask
from urbanst.trainer import chronological_split


def scalar_metrics(y, yhat, sel, floor=1e-6):
    """Plain-loop reference for the four metrics."""
    n = 0
    abs_sum = sq_sum = y_sum = 0.0
    ape_sum = 0.0
    ape_n = 0
    for a, b, keep in zip(y.ravel().tolist(), yhat.ravel().tolist(), sel.ravel().tolist()):
        if not keep:
            continue
        n += 1
        abs_sum += abs(a - b)
        sq_sum += (a - b) ** 2
        y_sum += abs(a)
        if abs(a) > floor:
            ape_sum += abs((b - a) / a)
            ape_n += 1
    return (abs_sum / n, math.sqrt(sq_sum / n), abs_sum / y_sum if y_sum else None,
            100 * ape_sum / ape_n if ape_n else None)


# --------------------------------------------------------------------------
# metrics


def test_worked_example():
    r = compute_metrics(np.array([2.0, 4.0]), np.array([1.0, 5.0]))
    assert (r.mae, r.rmse, r.mre, r.mape_percent) == (1.0, 1.0, 1 / 3, 37.5)


def test_perfect_prediction():
    y = np.random.default_rng(0).normal(size=50)
    r = compute_metrics(y, y)
    assert (r.mae, r.rmse, r.mre, r.mape_percent) == (0, 0, 0, 0)


def test_zero_targets_excluded_from_mape_only():
    r = compute_metrics(np.array([0.0, 2.0]), np.array([1.0, 3.0]))
    assert r.mae == 1 and r.mape_percent == 50 and r.mre == 1.0


def test_empty_mask():
    with pytest.raises(EvalError):
        compute_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))


def test_undefined_mre():
    r = compute_metrics(np.zeros(3), np.ones(3))
    assert r.mre is None and r.mape_percent is None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 1000))
def test_matches_scalar_loop(seed, n):
    g = np.random.default_rng(seed)
    y = g.normal(size=n) * g.choice([0, 1], size=n, p=[0.1, 0.9])
    yhat = y + g.normal(size=n)
    sel = g.random(n) < 0.8
    sel[0] = True
    r = compute_metrics(y, yhat, sel)
    ref = scalar_metrics(y, yhat, sel)
    for got, want in zip((r.mae, r.rmse, r.mre, r.mape_percent), ref):
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)
    assert r.rmse >= r.mae - 1e-12


# --------------------------------------------------------------------------
# masks


@pytest.mark.parametrize("ratio,observed", [(0.0, True), (1.0, False)])
def test_point_mask_extremes(ratio, observed):
    assert np.all(point_missing_mask((10, 20, 2), ratio, 0) == observed)


def test_point_mask_rate_and_determinism():
    m = point_missing_mask((100, 1000), 0.25, seed=3)
    assert abs((~m).mean() - 0.25) <= 0.02
    assert np.array_equal(m, point_missing_mask((100, 1000), 0.25, seed=3))


def test_block_mask_zero_rate():
    assert block_missing_mask((5, 100, 2), 0.0, seed=0).all()


def test_block_mask_rate():
    m = block_missing_mask((300, 2000), 0.05, seed=0)
    assert 0.04 <= (~m).mean() <= 0.06


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_block_runs_are_contiguous_and_span_channels(seed, c):
    m = block_missing_mask((20, 300, c), 0.1, (4, 12), seed)
    assert np.all(m == m[:, :, :1])
    missing = ~m[:, :, 0]
    for row in missing:
        edges = np.diff(np.concatenate([[0], row.astype(int), [0]]))
        lengths = np.flatnonzero(edges == -1) - np.flatnonzero(edges == 1)
        # overlapping outages merge, so runs are at least the minimum length
        # unless truncated by the end of the series
        starts = np.flatnonzero(edges == 1)
        ok = (lengths >= 4) | (starts + lengths == row.size)
        assert ok.all()


# --------------------------------------------------------------------------
# baselines


def test_ha_equal_lengths_copies_history():
    h = np.random.default_rng(0).normal(size=(3, 12, 2))
    np.testing.assert_array_equal(baseline_ha(h, 12), h)


def test_ha_single_step_is_last_value():
    h = np.random.default_rng(0).normal(size=(3, 5, 1))
    np.testing.assert_array_equal(baseline_ha(h, 1), h[:, -1:])


def test_ha_tiles_for_long_horizon():
    h = np.arange(3.0)[None, :, None]
    assert baseline_ha(h, 7)[0, :, 0].tolist() == [2, 0, 1, 2, 0, 1, 2]


@settings(max_examples=30)
@given(st.floats(-100, 100), st.integers(1, 10), st.integers(1, 30))
def test_ha_constant(c, t_h, t_f):
    assert np.all(baseline_ha(np.full((2, t_h, 1), c), t_f) == c)


def test_mean_impute_hand_example():
    x = np.array([[2.0, 0.0, 4.0]])[:, :, None]
    m = np.array([[True, False, True]])[:, :, None]
    assert baseline_mean_impute(x, m)[0, :, 0].tolist() == [2, 3, 4]


def test_mean_impute_fully_observed():
    x = np.random.default_rng(0).normal(size=(3, 6, 2))
    np.testing.assert_array_equal(baseline_mean_impute(x, np.ones(x.shape, bool)), x)


def test_mean_impute_constant_fill_and_offenders():
    g = np.random.default_rng(0)
    x = g.normal(size=(3, 10, 2))
    m = g.random(x.shape) < 0.5
    m[:, 0] = True
    filled = baseline_mean_impute(x, m)
    for n in range(3):
        for c in range(2):
            assert len(set(filled[n, ~m[n, :, c], c].tolist())) <= 1
    m[1, :, 1] = False
    with pytest.raises(ImputeError) as err:
        baseline_mean_impute(x, m)
    assert err.value.offenders == [(1, 1)]


def test_knn_constant_neighbourhood():
    x = np.full((4, 3, 1), 7.0)
    x[0] = 0
    m = np.ones(x.shape, bool)
    m[0, 1] = False
    adj = AdjacencyMatrix(np.ones((4, 4)) - np.eye(4), "gaussian")
    assert baseline_knn_impute(x, m, adj, k=2)[0, 1, 0] == 7.0


def test_knn_line_graph_k1():
    w = np.array([[0, 0.9, 0.1], [0.9, 0, 0.5], [0.1, 0.5, 0]])
    x = np.array([[1.0], [0.0], [5.0]])[:, :, None]
    m = np.array([[True], [False], [True]])[:, :, None]
    m2 = np.ones((3, 2, 1), bool)
    m2[1, 0] = False
    x2 = np.concatenate([x, x + 1], axis=1)
    out = baseline_knn_impute(x2, m2, AdjacencyMatrix(w, "gaussian"), k=1)
    assert out[1, 0, 0] == 1.0  # node 0 carries the heavier edge


def test_knn_saturated_is_neighbour_mean():
    g = np.random.default_rng(1)
    x = g.normal(size=(5, 4, 1))
    m = np.ones(x.shape, bool)
    m[2, 3] = False
    m[4, 3] = False
    w = g.uniform(0.1, 1, (5, 5))
    w = (w + w.T) / 2
    np.fill_diagonal(w, 0)
    out = baseline_knn_impute(x, m, AdjacencyMatrix(w, "gaussian"), k=10)
    assert out[2, 3, 0] == pytest.approx(x[[0, 1, 3], 3, 0].mean())


def test_knn_falls_back_to_node_mean():
    x = np.array([[1.0, 3.0, 0.0], [0.0, 0.0, 0.0]])[:, :, None]
    m = np.array([[True, True, False], [True, True, False]])[:, :, None]
    adj = AdjacencyMatrix(np.array([[0, 1.0], [1.0, 0]]), "gaussian")
    assert baseline_knn_impute(x, m, adj)[0, 2, 0] == 2.0


# --------------------------------------------------------------------------
# protocols


class Oracle:
    name = "oracle"

    def __init__(self, truth, offset=0):
        self.truth = truth
        self.offset = offset

    def forecast(self, history, history_mask, horizon):
        # locate the window by matching the history against the truth
        t_h = history.shape[1]
        for s in range(self.truth.shape[1] - t_h + 1):
            if np.array_equal(self.truth[:, s:s + t_h], history):
                return self.truth[:, s + t_h:s + t_h + horizon]
        raise AssertionError("history not found")

    def impute(self, x, mask):
        lo = self.truth.shape[1] - x.shape[1]
        return self.truth[:, lo:]


def _periodic(period=12, n=4, t=600, c=1):
    base = np.random.default_rng(0).normal(size=(n, period, c))
    values = np.tile(base, (1, t // period + 1, 1))[:, :t]
    return SpatioTemporalTensor(values)


@pytest.mark.parametrize("task", ["forecast_short", "forecast_long", "impute_point", "impute_block"])
def test_oracle_scores_zero(task):
    x = SpatioTemporalTensor(np.random.default_rng(1).normal(size=(4, 500, 2)))
    r = run_protocol(Oracle(x.values), x, None, ProtocolSpec.named(task), seed=0)
    assert r.mae == 0 and r.rmse == 0 and r.n_evaluated > 0


def test_ha_exact_on_aligned_period():
    x = _periodic(12)
    assert run_protocol(HistoricalAverage(), x, None, ProtocolSpec.named("forecast_short")).mae == 0


def test_protocol_deterministic():
    x = SpatioTemporalTensor(np.random.default_rng(2).normal(size=(6, 400, 1)) + 3)
    spec = ProtocolSpec.named("impute_block")
    assert run_protocol(MeanImputer(), x, None, spec, seed=5) == run_protocol(MeanImputer(), x, None, spec, seed=5)


def test_forecast_windows_disjoint_in_test_range():
    split = chronological_split(1000)
    starts = forecast_windows(split.test, 24, 24)
    assert starts[0] == split.test[0] and starts[-1] + 48 <= split.test[1]
    assert all(b - a == 48 for a, b in zip(starts, starts[1:]))


class Recorder:
    name = "rec"

    def impute(self, x, mask):
        self.mask = mask.copy()
        return x


def test_imputation_scores_only_hidden_observed_entries():
    g = np.random.default_rng(3)
    x = SpatioTemporalTensor(g.normal(size=(5, 300, 1)) + 2)
    orig = g.random(x.shape) < 0.8
    rec = Recorder()
    r = run_protocol(rec, x, orig, ProtocolSpec.named("impute_point"), seed=1)
    lo = chronological_split(300).test[0]
    kept = point_missing_mask((5, 300 - lo, 1), 0.25, 1)
    assert np.array_equal(rec.mask, orig[:, lo:] & kept)
    assert r.n_evaluated == int((orig[:, lo:] & ~kept).sum())


def test_short_spec_rejects_long_horizon():
    with pytest.raises(ValueError):
        ProtocolSpec("forecast_short", 12, 24)


def test_report_outputs(tmp_path):
    x = _periodic(12)
    r = run_protocol(HistoricalAverage(), x, None, ProtocolSpec.named("forecast_short"))
    write_reports_csv(tmp_path / "m.csv", [r])
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert {"mae", "rmse", "mape_percent"} <= set(header)
    table = format_table([r])
    assert "MAE" in table and "forecast_short" in table
