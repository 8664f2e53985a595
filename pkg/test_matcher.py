#!/usr/bin/env python3
"""
Hungarian matching with the lexicographic tie-break, checked against brute force.
"""

import itertools

import numpy as np
import pytest

from negrank.corpus import MomentSpan
from negrank.errors import DegenerateSpan, EmptyMatrix
from negrank.losses import BaseLossConfig
from negrank.matcher import MomentPrediction, match, match_cost, solve


def _brute_force(cost):
    n_rows, n_cols = cost.shape
    candidates = []
    if n_rows <= n_cols:
        for cols in itertools.permutations(range(n_cols), n_rows):
            candidates.append([(row, col) for row, col in enumerate(cols)])
    else:
        for rows in itertools.permutations(range(n_rows), n_cols):
            candidates.append(sorted((row, col) for col, row in enumerate(rows)))
    scored = [(sum(cost[r, c] for r, c in pairs), pairs) for pairs in candidates]
    best = min(total for total, _ in scored)
    return best, min(pairs for total, pairs in scored if total == best)


def test_two_by_two_example():
    assignment = solve([[1, 2], [3, 0]])
    assert assignment.pairs == [(0, 0), (1, 1)]
    assert assignment.total_cost == pytest.approx(1.0)


def test_diagonal_dominance():
    cost = np.full((4, 4), 10.0)
    np.fill_diagonal(cost, 0.0)
    assert solve(cost).pairs == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_all_equal_matrix_takes_smallest_pairs():
    assert solve(np.ones((3, 3))).pairs == [(0, 0), (1, 1), (2, 2)]
    assert solve(np.ones((2, 4))).pairs == [(0, 0), (1, 1)]
    assert solve(np.ones((4, 2))).pairs == [(0, 0), (1, 1)]


def test_rectangular_skips_unhelpful_rows():
    cost = np.array([[5.0], [1.0], [3.0]])
    assert solve(cost).pairs == [(1, 0)]


def test_random_matrices_match_brute_force():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        shape = tuple(int(x) for x in rng.integers(1, 7, size=2))
        if rng.random() < 0.5:
            cost = rng.integers(0, 4, size=shape).astype(float)
        else:
            cost = rng.normal(size=shape)
        best, pairs = _brute_force(cost)
        assignment = solve(cost)
        assert assignment.total_cost == pytest.approx(best)
        assert assignment.pairs == pairs
        assert len(assignment.pairs) == min(shape)


def test_empty_and_non_finite_matrices():
    with pytest.raises(EmptyMatrix):
        solve(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        solve([[1.0, float("inf")]])


def test_exact_prediction_costs_minus_class_weight():
    cfg = BaseLossConfig()
    pred = MomentPrediction(span=(0.5, 0.2), class_probs=(1.0, 0.0))
    cost = match_cost([pred], [(0.5, 0.2)], cfg)
    assert cost.shape == (1, 1)
    assert cost[0, 0] == pytest.approx(-cfg.lambda_cls)


def test_identical_predictions_give_identical_rows():
    pred = MomentPrediction(span=(0.3, 0.1), class_probs=(0.6, 0.4))
    cost = match_cost([pred, pred], [(0.35, 0.2), (0.8, 0.1)])
    np.testing.assert_array_equal(cost[0], cost[1])


def test_match_normalizes_spans_in_seconds():
    preds = [
        MomentPrediction(span=(0.8, 0.1), class_probs=(0.9, 0.1)),
        MomentPrediction(span=(0.25, 0.1), class_probs=(0.5, 0.5)),
    ]
    assignment = match(preds, [MomentSpan(start=4.0, end=6.0)], duration=20.0)
    assert assignment.pairs == [(1, 0)]
    assert assignment.matched_predictions == [1]


def test_prediction_validation():
    with pytest.raises(ValueError):
        MomentPrediction(span=(0.5, 0.1), class_probs=(0.7, 0.7))
    with pytest.raises(DegenerateSpan):
        match_cost([MomentPrediction(span=(0.5, 0.0), class_probs=(0.5, 0.5))], [(0.5, 0.1)])
    with pytest.raises(EmptyMatrix):
        match_cost([], [(0.5, 0.1)])


@pytest.mark.parametrize("seed", range(20))
def test_row_permutation_permutes_the_assignment(seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(-1.0, 1.0, size=(int(rng.integers(1, 7)), int(rng.integers(1, 7))))
    perm = rng.permutation(cost.shape[0])
    original = solve(cost)
    permuted = solve(cost[perm])
    assert sorted((int(perm[row]), col) for row, col in permuted.pairs) == sorted(original.pairs)
    assert permuted.total_cost == pytest.approx(original.total_cost)
