import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sorql.mdp import TabularMdp, random_mdp, sample_transition, sor_star
from sorql.relaxation import SorEstimator


def uniform_walk(est, mdp, steps, seed, update=True):
    """Reference driver: uniform random actions along one trajectory."""
    rng = np.random.default_rng(seed)
    i = 0
    for _ in range(steps):
        a = int(rng.integers(mdp.n_actions))
        j, _ = sample_transition(mdp, i, a, rng)
        if update:
            est.observe(i, a, j)
        else:
            est.record(i, a, j)
        i = j
    return est


class TestRecord:
    def test_first_record(self):
        est = SorEstimator(2, 2, 0.9)
        est.record(0, 0, 0)
        assert est.counts[0, 0, 0] == 1
        assert est.total_steps == 1

    def test_counts_sum_to_steps(self):
        est = SorEstimator(3, 2, 0.9)
        rng = np.random.default_rng(0)
        for _ in range(10):
            est.record(*(int(x) for x in rng.integers(0, [3, 2, 3])))
        assert est.counts.sum() == 10 == est.total_steps
        np.testing.assert_array_equal(est.visits, est.counts.sum(axis=1))

    def test_index_out_of_range(self):
        est = SorEstimator(2, 2, 0.9)
        with pytest.raises(IndexError):
            est.record(2, 0, 0)
        with pytest.raises(IndexError):
            est.observe(0, 5, 0)

    def test_self_loop_frequencies(self):
        mdp = random_mdp(3, 2, 0.2, seed=3, discount=0.9)
        est = uniform_walk(SorEstimator(3, 2, 0.9), mdp, 100_000, seed=1, update=False)
        for i in range(3):
            for a in range(2):
                p_hat = est.counts[i, i, a] / est.visits[i, a]
                assert abs(p_hat - mdp.transition[i, a, i]) < 0.02


class TestMinSelfLoop:
    def test_no_data(self):
        assert SorEstimator(2, 2, 0.9).estimated_min_self_loop() == 0.0

    def test_unvisited_pair_gives_zero(self):
        est = SorEstimator(1, 2, 0.9)
        est.record(0, 0, 0)
        assert est.estimated_min_self_loop() == 0.0

    def test_deterministic_self_loops(self):
        est = SorEstimator(1, 3, 0.9)
        for a in range(3):
            est.record(0, a, 0)
        assert est.estimated_min_self_loop() == 1.0

    def test_known_mdp(self):
        mdp = random_mdp(3, 2, 0.3, seed=5, discount=0.9)
        est = uniform_walk(SorEstimator(3, 2, 0.9), mdp, 100_000, seed=2, update=False)
        assert abs(est.estimated_min_self_loop() - mdp.self_loop().min()) < 0.02

    def test_literal_normalization(self):
        est = SorEstimator(1, 2, 0.9, normalization="total")
        est.record(0, 0, 0)
        est.record(0, 1, 0)
        # Y[0, 0, a] / n = 1/2 for both actions
        assert est.estimated_min_self_loop() == 0.5


class TestUpdateW:
    def test_already_at_target(self):
        est = SorEstimator(1, 1, 0.9, w0=10.0)
        est.record(0, 0, 0)
        for n in (1, 2, 50):
            assert est.update_w(n) == pytest.approx(10.0, rel=1e-15)

    def test_target_one_keeps_one(self):
        est = SorEstimator(2, 1, 0.9)
        est.record(0, 0, 1)  # state 1 unvisited, so p_min = 0
        for n in range(1, 100):
            assert est.update_w(n) == 1.0

    def test_single_state_target_is_upper_bound(self):
        est = SorEstimator(1, 2, 0.95)
        est.observe(0, 0, 0)
        assert est.w == 1.0  # action 1 not yet visited, target 1
        est.observe(0, 1, 0)
        assert est.estimated_min_self_loop() == 1.0
        # alpha(2) = 1/2 moves halfway to the target 1/(1 - gamma) = 20
        assert est.w == pytest.approx(10.5)

    def test_clamped(self):
        est = SorEstimator(1, 1, 0.5, step_exponent=0.6)
        est.record(0, 0, 0)
        for n in range(1, 20):
            w = est.update_w(n)
            assert 1.0 <= w <= 2.0

    def test_frozen(self):
        est = SorEstimator(1, 2, 0.95, frozen=True)
        for _ in range(5):
            est.observe(0, 0, 0)
            est.observe(0, 1, 0)
        assert est.w == 1.0
        assert est.total_steps == 10

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            SorEstimator(1, 1, 0.9, step_exponent=0.5)
        with pytest.raises(ValueError):
            SorEstimator(1, 1, 0.9, w0=0.5)
        with pytest.raises(ValueError):
            SorEstimator(1, 1, 0.9, normalization="bogus")
        with pytest.raises(ValueError):
            SorEstimator(1, 1, 0.9).update_w(0)

    def test_converges_to_w_star(self):
        mdp = random_mdp(5, 2, 0.3, seed=17, discount=0.9)
        est = uniform_walk(SorEstimator(5, 2, 0.9), mdp, 100_000, seed=4)
        assert abs(est.w - sor_star(mdp)) < 0.05

    def test_trace(self, tmp_path):
        est = SorEstimator(1, 1, 0.9, trace_every=2)
        for _ in range(6):
            est.observe(0, 0, 0)
        assert [s for s, _, _ in est.w_history] == [2, 4, 6]
        path = tmp_path / "trace.csv"
        est.write_trace(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,w,p_min_estimate"
        assert len(lines) == 4


transitions = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 2)),
                       min_size=1, max_size=200)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(transitions, st.floats(1.0, 10.0), st.floats(0.51, 1.0))
    def test_monotone_bracket_and_clamp(self, seq, w0, expo):
        gamma = 0.9
        est = SorEstimator(3, 2, gamma, w0=w0, step_exponent=expo)
        for i, a, j in seq:
            before = est.w
            est.record(i, a, j)
            target = 1.0 / (1.0 - gamma * est.estimated_min_self_loop())
            after = est.update_w()
            lo, hi = min(before, target), max(before, target)
            assert lo - 1e-12 <= after <= hi + 1e-12
            assert 1.0 <= after <= 1.0 / (1.0 - gamma)
        assert est.counts.sum() == len(seq)

    @settings(max_examples=30, deadline=None)
    @given(transitions, st.floats(1.0, 10.0), st.floats(0.51, 1.0))
    def test_determinism(self, seq, w0, expo):
        traces = []
        for _ in range(2):
            est = SorEstimator(3, 2, 0.9, w0=w0, step_exponent=expo)
            traces.append([est.observe(i, a, j) for i, a, j in seq])
        assert traces[0] == traces[1]

    @settings(max_examples=30, deadline=None)
    @given(transitions)
    def test_observe_equals_record_then_update(self, seq):
        a_est = SorEstimator(3, 2, 0.9)
        b_est = SorEstimator(3, 2, 0.9)
        for i, a, j in seq:
            a_est.observe(i, a, j)
            b_est.record(i, a, j)
            b_est.update_w()
        assert a_est.w == b_est.w


def test_single_state_mdp_w_star_agrees():
    mdp = TabularMdp(np.ones((1, 3, 1)), np.zeros((1, 3, 1)), 0.95)
    est = SorEstimator(1, 3, 0.95)
    for n in range(3000):
        est.observe(0, n % 3, 0)
    # w_n is the running mean of the targets: two early targets of 1, then 20s
    assert est.w == pytest.approx(sor_star(mdp) - 2 * 19 / 3000, rel=1e-12)
