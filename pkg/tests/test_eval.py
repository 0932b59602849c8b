"""Ranking and metrics: hand-counted ranks, a brute-force full-sort oracle,
baseline transition tables, and threaded evaluation equivalence."""

import numpy as np
import pytest

from lightmove.data import Example, Session, CheckIn
from lightmove.errors import ConfigError, ShapeError
from lightmove.evaluate import (
    EvalReport,
    FrequencyBaseline,
    MarkovBaseline,
    baseline_predict,
    collect_ranks,
    compute_metrics,
    fit_count_baselines,
    model_predictor,
    rank_of_target,
    timed_evaluate,
)
from lightmove.model import HistoryBatch, ModelConfig, count_params, forward, init_params
from lightmove.odeint import SolveSpec


# ---------------------------------------------------------------------------
# rank_of_target


def test_rank_max_probability_is_one():
    row = np.array([0.1, 0.6, 0.3])
    assert rank_of_target(row, 1) == 1


def test_rank_counts_strictly_greater_plus_earlier_ties():
    # uniform row, target at index 0: no greater, no earlier ties
    assert rank_of_target(np.full(4, 0.25), 0) == 1
    # same row, target at index 2: two earlier ties
    assert rank_of_target(np.full(4, 0.25), 2) == 3


def test_rank_hand_case():
    row = np.array([0.1, 0.5, 0.4])
    assert rank_of_target(row, 2) == 2  # one strictly greater, no ties before


def test_rank_unknown_target_is_none():
    row = np.array([0.2, 0.3, 0.5])
    assert rank_of_target(row, 2, unknown_index=2) is None


def test_rank_full_sort_oracle():
    # brute force: rank == position in a stable descending sort
    r = np.random.default_rng(123)
    for _ in range(1000):
        n = int(r.integers(2, 30))
        row = r.random(n)
        if r.random() < 0.3:  # force ties
            row = np.round(row, 1)
        target = int(r.integers(0, n))
        order = np.argsort(-row, kind="stable")
        want = int(np.nonzero(order == target)[0][0]) + 1
        assert rank_of_target(row, target) == want


def test_rank_rejects_bad_target():
    with pytest.raises(ShapeError):
        rank_of_target(np.array([0.5, 0.5]), 2)


# ---------------------------------------------------------------------------
# compute_metrics


def test_metrics_hand_values():
    hits, mrr = compute_metrics([1, 3, 11])
    assert hits[1] == pytest.approx(1 / 3)
    assert hits[5] == pytest.approx(2 / 3)
    assert hits[10] == pytest.approx(2 / 3)
    assert mrr == pytest.approx((1 + 1 / 3 + 1 / 11) / 3)
    assert mrr == pytest.approx(0.4747, abs=5e-5)


def test_metrics_all_rank_one():
    hits, mrr = compute_metrics([1, 1, 1, 1])
    assert hits == {1: 1.0, 5: 1.0, 10: 1.0}
    assert mrr == 1.0


def test_metrics_single_rank_two():
    hits, mrr = compute_metrics([2], ks=(1, 2))
    assert hits == {1: 0.0, 2: 1.0}
    assert mrr == 0.5


def test_metrics_empty_errors():
    with pytest.raises(ValueError):
        compute_metrics([])


# ---------------------------------------------------------------------------
# EvalReport


def test_report_round_trip_and_invariants():
    hits, mrr = compute_metrics([1, 2, 7, 30])
    report = EvalReport(hits_at=hits, mrr=mrr, num_params=10,
                        inference_seconds=0.5, num_examples=2, num_targets=4,
                        excluded_targets=0, threads=1, label="test")
    assert report.hits_at[1] <= report.hits_at[5] <= report.hits_at[10]
    assert report.mrr >= report.hits_at[1]
    d = report.to_dict()
    assert d["mrr"] == mrr
    text = report.to_text()
    assert "mrr" in text and "test" in text


# ---------------------------------------------------------------------------
# baselines


def _session(user, locs, t0=0, step=100):
    return Session([CheckIn(user, t0 + i * step, loc) for i, loc in enumerate(locs)],
                   session_index=0)


def test_frequency_baseline_degenerate_user():
    b = FrequencyBaseline(num_locations=4, horizon=2)
    for _ in range(5):
        b.observe(0, 1)
    dist = b.distribution(0)
    assert dist[1] > 0.999
    assert dist.sum() == pytest.approx(1.0)
    pred = b.predict(HistoryBatch(session=np.array([[0, 0]]),
                                  history=np.zeros((0, 2), dtype=np.intp), user=0))
    assert pred.shape == (2, 4)
    assert np.array_equal(pred[0], pred[1])


def test_frequency_baseline_smoothing_gives_unseen_mass():
    b = FrequencyBaseline(num_locations=3, horizon=1)
    b.observe(0, 0)
    b.observe(0, 0)
    dist = b.distribution(0)
    assert dist[1] > 0.0 and dist[2] > 0.0
    assert dist[0] > dist[1]


def test_frequency_baseline_unseen_user_is_uniform():
    b = FrequencyBaseline(num_locations=4, horizon=1)
    np.testing.assert_allclose(b.distribution(9), np.full(4, 0.25), atol=1e-12)


def test_markov_transition_hand_counts():
    # user stream 0->1->0->1->2: from 0 goes to 1 twice; from 1: 0 once, 2 once
    splits = {"u": [_session("u", ["A", "B", "A", "B", "C"])]}
    vocab = {"A": 0, "B": 1, "C": 2}
    _, markov = fit_count_baselines(splits, vocab, {"u": 0}, num_locations=4,
                                    horizon=1)
    t = markov.transition_matrix(0)
    assert t.shape == (4, 4)
    assert t[0, 1] == pytest.approx(1.0, abs=1e-4)
    assert t[1, 0] == pytest.approx(0.5, abs=1e-4)
    assert t[1, 2] == pytest.approx(0.5, abs=1e-4)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)


def test_markov_unseen_row_backs_off_to_frequency():
    splits = {"u": [_session("u", ["A", "B"])]}
    vocab = {"A": 0, "B": 1, "C": 2}
    freq, markov = fit_count_baselines(splits, vocab, {"u": 0}, num_locations=4,
                                       horizon=1)
    t = markov.transition_matrix(0)
    np.testing.assert_allclose(t[2], freq.distribution(0), atol=1e-12)


def test_markov_deterministic_cycle_perfect_hits():
    # strict cycle A->B->C->A: first-step prediction from any state is exact
    locs = ["A", "B", "C"] * 20
    splits = {"u": [_session("u", locs)]}
    vocab = {"A": 0, "B": 1, "C": 2}
    _, markov = fit_count_baselines(splits, vocab, {"u": 0}, num_locations=4,
                                    horizon=1)
    batch = HistoryBatch(session=np.array([[0, 0]]),
                         history=np.zeros((0, 2), dtype=np.intp), user=0)
    pred = markov.predict(batch)
    assert pred.shape == (1, 4)
    assert int(np.argmax(pred[0])) == 1  # after A comes B


def test_markov_horizon_chains_transition_matrix():
    locs = ["A", "B", "C"] * 20
    splits = {"u": [_session("u", locs)]}
    vocab = {"A": 0, "B": 1, "C": 2}
    _, markov = fit_count_baselines(splits, vocab, {"u": 0}, num_locations=4,
                                    horizon=2)
    batch = HistoryBatch(session=np.array([[0, 0]]),
                         history=np.zeros((0, 2), dtype=np.intp), user=0)
    pred = markov.predict(batch)
    t = markov.transition_matrix(0)
    state = np.zeros(4)
    state[0] = 1.0
    p1 = state @ t
    p2 = p1 @ t
    np.testing.assert_allclose(pred[0], p1, atol=1e-12)
    np.testing.assert_allclose(pred[1], p2, atol=1e-12)


def test_markov_unknown_user_backs_off_everywhere():
    splits = {"u": [_session("u", ["A", "B", "A"])]}
    vocab = {"A": 0, "B": 1}
    freq, markov = fit_count_baselines(splits, vocab, {"u": 0}, num_locations=3,
                                       horizon=1)
    # user index 7 was never observed: every row is the smoothed frequency
    t = markov.transition_matrix(7)
    for row in t:
        np.testing.assert_allclose(row, freq.distribution(7), atol=1e-12)


# ---------------------------------------------------------------------------
# evaluation loop


def tiny_setup():
    config = ModelConfig(num_locations=6, num_users=2, loc_dim=3, time_dim=2,
                         user_dim=2, num_time_slots=4, session_len=3, horizon=2,
                         jumps=1, solver=SolveSpec("euler", 0.5))
    params = init_params(config, seed=3)
    r = np.random.default_rng(0)
    examples = []
    for i in range(6):
        batch = HistoryBatch(
            session=np.stack([r.integers(0, 5, 3), r.integers(0, 4, 3)], axis=1),
            history=np.stack([r.integers(0, 5, 4), r.integers(0, 4, 4)], axis=1),
            user=int(r.integers(0, 2)),
        )
        examples.append(Example(batch, r.integers(0, 5, 2), f"u{i % 2}"))
    return config, params, examples


def test_collect_ranks_counts_targets():
    config, params, examples = tiny_setup()
    predict = model_predictor(params, config)
    ranks, excluded = collect_ranks(predict, examples, unknown_index=5)
    assert excluded == 0
    assert len(ranks) == sum(len(e.targets) for e in examples)
    assert all(1 <= r <= config.num_locations for r in ranks)


def test_collect_ranks_excludes_unknown():
    config, params, examples = tiny_setup()
    examples[0].targets[0] = 5  # unknown index
    predict = model_predictor(params, config)
    ranks, excluded = collect_ranks(predict, examples, unknown_index=5)
    assert excluded == 1
    assert len(ranks) == sum(len(e.targets) for e in examples) - 1


def test_timed_evaluate_report_fields():
    config, params, examples = tiny_setup()
    predict = model_predictor(params, config)
    report = timed_evaluate(predict, examples, num_params=count_params(config),
                            unknown_index=5, label="model")
    assert report.num_examples == 6
    assert report.num_targets == 12
    assert report.inference_seconds > 0.0
    assert report.label == "model"
    assert report.num_params == count_params(config)


def test_timed_evaluate_threads_match_serial():
    config, params, examples = tiny_setup()
    predict = model_predictor(params, config)
    serial = timed_evaluate(predict, examples, num_params=0, unknown_index=5,
                            threads=1)
    threaded = timed_evaluate(predict, examples, num_params=0, unknown_index=5,
                              threads=3)
    assert serial.mrr == pytest.approx(threaded.mrr, abs=1e-12)
    assert serial.hits_at == threaded.hits_at
    assert threaded.threads == 3


def test_baseline_predict_dispatch():
    config, params, examples = tiny_setup()
    batch = examples[0].batch
    freq = FrequencyBaseline(num_locations=6, horizon=2)
    out = baseline_predict("frequency", freq, batch)
    assert out.shape == (2, 6)
    with pytest.raises(ConfigError):
        baseline_predict("nope", None, batch)


def test_plain_gru_baseline_requires_gru_arch():
    config, params, examples = tiny_setup()
    with pytest.raises(ConfigError):
        baseline_predict("plain_gru", (params, config), examples[0].batch)


def test_plain_gru_baseline_runs_with_gru_arch():
    config = ModelConfig(num_locations=6, num_users=2, loc_dim=3, time_dim=2,
                         user_dim=2, num_time_slots=4, session_len=3, horizon=2,
                         jumps=1, solver=SolveSpec("euler", 0.5), arch="gru")
    params = init_params(config, seed=1)
    _, _, examples = tiny_setup()
    out = baseline_predict("plain_gru", (params, config), examples[0].batch)
    assert out.shape == (2, 6)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_model_predictor_matches_forward():
    config, params, examples = tiny_setup()
    predict = model_predictor(params, config)
    got = predict(examples[0].batch)
    want = forward(examples[0].batch, params, config).data
    np.testing.assert_array_equal(got, want)
