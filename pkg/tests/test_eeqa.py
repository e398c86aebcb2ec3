import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankfed.eeqa import QuotaAllocation, allocate_quotas, initial_uniform_allocation, normalize_scores

from eeqa_oracle import reference_allocate


def random_alphas(rng, j):
    kind = rng.integers(3)
    if kind == 0:
        v = rng.dirichlet(np.ones(j))
    elif kind == 1:
        v = normalize_scores(rng.normal(scale=5, size=j))
    else:
        # many exact ties
        v = np.full(j, 1.0 / j)
    return v / v.sum()


def test_oracle_hand_trace():
    assert reference_allocate([0.5, 0.3, 0.2], 10, 4) == ([4, 4, 2], 0)


def test_hand_trace():
    alloc = allocate_quotas([0.5, 0.3, 0.2], 10, 4)
    assert alloc.quotas == (4, 4, 2)
    assert alloc.leftover == 0


def test_exact_floors():
    assert allocate_quotas([0.25] * 4, 8, 64).quotas == (2, 2, 2, 2)


def test_single_site_cap_reports_leftover():
    alloc = allocate_quotas([1.0], 5, 3)
    assert alloc.quotas == (3,)
    assert alloc.leftover == 2


def test_matches_oracle_on_random_triples():
    rng = np.random.default_rng(20)
    for _ in range(1000):
        j = int(rng.integers(1, 9))
        alphas = random_alphas(rng, j)
        budget = int(rng.integers(1, 200))
        cap = int(rng.integers(1, 70))
        alloc = allocate_quotas(alphas, budget, cap)
        q, left = reference_allocate(alphas.tolist(), budget, cap)
        assert list(alloc.quotas) == q
        assert alloc.leftover == left
        assert sum(alloc.quotas) == min(budget, j * cap)
        assert max(alloc.quotas) <= cap


@settings(max_examples=200)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10).filter(lambda v: sum(v) > 1e-3),
    st.integers(1, 300),
    st.integers(1, 80),
)
def test_budget_and_cap_properties(raw, budget, cap):
    alphas = np.array(raw) / sum(raw)
    alloc = allocate_quotas(alphas, budget, cap)
    assert sum(alloc.quotas) == min(budget, len(raw) * cap)
    assert all(0 <= q <= cap for q in alloc.quotas)
    assert alloc.leftover == max(0, budget - len(raw) * cap)
    # determinism, including ties
    assert allocate_quotas(alphas, budget, cap) == alloc
    # an uncapped site with strictly higher share never ends below a lower one
    for i in range(len(raw)):
        for j in range(len(raw)):
            if alphas[i] > alphas[j] and alloc.quotas[i] < cap and alloc.quotas[j] < cap:
                assert alloc.quotas[i] >= alloc.quotas[j]


def test_floor_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(200):
        alphas = rng.dirichlet(np.ones(5))
        budget = int(rng.integers(1, 100))
        floors = np.floor(alphas * budget)
        order = np.argsort(-alphas)
        assert np.all(np.diff(floors[order]) <= 0)


def test_skewed_allocation_exists():
    alphas = normalize_scores([10.0, 0.0, 0.0, 0.0])
    alloc = allocate_quotas(alphas, 128, 64)
    assert max(alloc.quotas) == 64
    assert max(alloc.quotas) / max(min(alloc.quotas), 1) >= 20


def test_zero_quota_possible():
    alloc = allocate_quotas([0.9, 0.05, 0.05], 4, 4)
    assert 0 in alloc.quotas


def test_min_quota_keeps_floor_and_budget():
    rng = np.random.default_rng(6)
    for _ in range(300):
        j = int(rng.integers(1, 6))
        cap = int(rng.integers(2, 20))
        mq = int(rng.integers(0, cap + 1))
        budget = int(rng.integers(mq * j, mq * j + 60)) or 1
        alloc = allocate_quotas(random_alphas(rng, j), budget, cap, min_quota=mq)
        assert min(alloc.quotas) >= mq
        assert sum(alloc.quotas) == min(budget, j * cap)


def test_min_quota_over_budget():
    with pytest.raises(ValueError):
        allocate_quotas([0.5, 0.5], 3, 4, min_quota=2)


@pytest.mark.parametrize(
    "alphas, budget, cap",
    [([0.5, 0.4], 10, 4), ([], 10, 4), ([1.0], 0, 4), ([1.0], 3, 0)],
)
def test_invalid_inputs(alphas, budget, cap):
    with pytest.raises(ValueError):
        allocate_quotas(alphas, budget, cap)


def test_normalize_cases():
    assert normalize_scores([0, 0]).tolist() == [0.5, 0.5]
    assert np.allclose(normalize_scores([7.0] * 4), 0.25, atol=1e-15)
    assert np.allclose(normalize_scores([math.log(3), 0.0]), [0.75, 0.25], atol=1e-15)
    with pytest.raises(ValueError):
        normalize_scores([])


def test_initial_uniform():
    a = initial_uniform_allocation(4, 32, cap=64)
    assert a.quotas == (32,) * 4 and a.budget == 128
    assert initial_uniform_allocation(1, 1).quotas == (1,)
    assert initial_uniform_allocation(3, 5, cap=5).quotas == (5, 5, 5)
    with pytest.raises(ValueError):
        initial_uniform_allocation(2, 9, cap=8)


def test_allocation_rejects_over_cap():
    with pytest.raises(ValueError):
        QuotaAllocation((5,), 5, 4)
