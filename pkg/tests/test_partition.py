import numpy as np
import pytest
from hypothesis import given, strategies as st

from misa.model_zoo import transformer_description
from misa.partition import (
    ActiveSet,
    BudgetError,
    Role,
    Strategy,
    model_size,
    partition_model,
    select,
    select_budgeted,
    select_bottomk,
    select_topk,
    select_uniform,
)


def sized(*counts):
    return partition_model([(0, Role.Other, c, 1) for c in counts])


class ScriptedRng:
    """Returns scripted positions into the shrinking candidate pool."""

    def __init__(self, picks):
        self.picks = list(picks)

    def choice(self, n, p=None):
        return self.picks.pop(0)


class TestPartition:
    def test_two_modules(self):
        specs = partition_model([(0, "Wq", 4, 4), (0, "W1", 4, 16)])
        assert len(specs) == 2 and model_size(specs) == 80
        assert [s.id for s in specs] == [0, 1]
        assert specs[1].role is Role.W1 and specs[1].shape == (4, 16)

    def test_toy_transformer(self):
        specs = partition_model(transformer_description(2, 4))
        assert len(specs) == 12
        assert model_size(specs) == 384
        assert sum(s.param_count for s in specs if s.layer_index == 0) == 12 * 16

    def test_empty(self):
        with pytest.raises(ValueError):
            partition_model([])

    def test_zero_sized(self):
        with pytest.raises(ValueError):
            partition_model([(0, "Wq", 0, 4)])

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            partition_model([(0, "Wz", 2, 2)])


class TestBudgeted:
    def test_delta_one_selects_all(self):
        specs = sized(4, 4, 8)
        out = select_budgeted(specs, [0.2, 0.3, 0.5], 1.0, np.random.default_rng(0))
        assert out.ids == frozenset({0, 1, 2}) and out.total_params == 16

    def test_hand_trace_strict_budget(self):
        # draw order m2, m0, m1 against budget 8: 0+8<8 no, 0+4<8 yes, 4+4<8 no
        out = select_budgeted(sized(4, 4, 8), [1 / 3] * 3, 0.5, ScriptedRng([2, 0, 0]))
        assert out.ids == frozenset({0}) and out.total_params == 4

    def test_greedy_rejects_exact_fill(self):
        import misa.partition as part
        out = part._greedy(sized(4, 4, 8), [2, 0, 1], 8)
        assert out.ids == frozenset({0})

    def test_too_small_budget(self):
        with pytest.raises(BudgetError):
            select_budgeted(sized(4, 4, 8), [1 / 3] * 3, 0.2, np.random.default_rng(0))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            select_budgeted(sized(4, 4), [1.0], 0.5, np.random.default_rng(0))

    def test_deterministic(self):
        specs = sized(*range(1, 11))
        p = np.linspace(1, 2, 10)
        p /= p.sum()
        a = select_budgeted(specs, p, 0.4, np.random.default_rng(5))
        b = select_budgeted(specs, p, 0.4, np.random.default_rng(5))
        assert a == b

    @given(st.lists(st.integers(1, 20), min_size=1, max_size=10), st.floats(0.05, 1.0),
           st.integers(0, 2**32 - 1))
    def test_budget_invariant(self, counts, delta, seed):
        specs = sized(*counts)
        n = model_size(specs)
        p = np.full(len(specs), 1 / len(specs))
        if delta < 1 and delta * n <= min(counts):
            with pytest.raises(BudgetError):
                select_budgeted(specs, p, delta, np.random.default_rng(seed))
            return
        out = select_budgeted(specs, p, delta, np.random.default_rng(seed))
        assert out.total_params == sum(specs[i].param_count for i in out.ids)
        assert out.ids
        if delta == 1:
            assert out.total_params == n
        else:
            assert out.total_params < delta * n

    def test_single_draw_frequencies(self):
        # equal sizes with a budget admitting exactly one module: selection frequency = probs
        specs = sized(5, 5, 5, 5)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        rng = np.random.default_rng(11)
        draws = 100_000
        counts = np.zeros(4)
        for _ in range(draws):
            (only,) = select_budgeted(specs, p, 0.3, rng).ids
            counts[only] += 1
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


class TestRankedAndUniform:
    specs = sized(4, 4, 4)
    delta = 9 / 12  # budget 9

    def test_topk(self):
        assert select_topk(self.specs, [5, 1, 3], self.delta).ids == frozenset({0, 2})

    def test_bottomk(self):
        assert select_bottomk(self.specs, [5, 1, 3], self.delta).ids == frozenset({1, 2})

    def test_uniform_single_module(self):
        out = select_uniform(sized(7), 1.0, np.random.default_rng(0))
        assert out.ids == frozenset({0})

    def test_ties_go_to_lower_id(self):
        assert select_topk(self.specs, [1, 1, 1], 5 / 12).ids == frozenset({0})
        assert select_bottomk(self.specs, [1, 1, 1], 5 / 12).ids == frozenset({0})

    @given(st.permutations(range(5)))
    def test_permutation_invariance(self, perm):
        # distinct gains: the chosen modules depend on gains, not on list position
        gains = [2.0, 7.0, 6.0, 1.0, 3.0]
        counts = [3, 4, 4, 2, 5]
        base = partition_model([(0, "Other", c, 1) for c in counts])
        permuted = partition_model([(0, "Other", counts[i], 1) for i in perm])
        for pick in (select_topk, select_bottomk):
            ref = pick(base, gains, 0.5).ids
            got = pick(permuted, [gains[i] for i in perm], 0.5).ids
            assert {perm[i] for i in got} == set(ref)

    def test_dispatch(self):
        rng = np.random.default_rng(0)
        specs = sized(4, 4, 4)
        gains = [5, 1, 3]
        probs = [1 / 3] * 3
        assert select(Strategy.TopK, specs, probs, gains, self.delta, rng).ids == frozenset({0, 2})
        assert select("bottomk", specs, probs, gains, self.delta, rng).ids == frozenset({1, 2})
        assert isinstance(select("uniform", specs, probs, gains, self.delta, rng), ActiveSet)
        assert isinstance(select("misa", specs, probs, gains, self.delta, rng), ActiveSet)

    def test_budget_error_for_ranked(self):
        with pytest.raises(BudgetError):
            select_topk(sized(4, 4, 8), [1, 2, 3], 0.2)
