import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entropy_trap.environments import (
    GaussianPolicyParams,
    Obstacle2DState,
    alpha_scaled_toy,
    build_toy,
    build_trap_chain,
    crosses_wall,
    discretize_obstacle2d,
    misleading_reward_interval,
    obstacle2d_step,
    toy_gaussian_expected_q,
    toy_gaussian_values,
)
from entropy_trap.mdp import validate
from entropy_trap.solvers import plain_value_iteration, soft_value_iteration

ALPHAS = [0.1, 0.5, 1.0, 2.0, 10.0]


def soft_margin(mdp, alpha=None):
    q = soft_value_iteration(mdp, alpha).Q["s_0"]
    return q["A_2"] - q["A_1"]


class TestToy:
    def test_shape(self, toy):
        assert validate(toy).ok
        assert len(toy.states) == 6
        assert [a.weight for a in toy["s_g"].atoms] == [0.2, 0.9, 0.9]
        assert toy["s_b"].atoms[0].weight == 2.0
        assert (toy.gamma, toy.alpha, toy.terminal_timing) == (0.99, 1.0, "on_entry")

    def test_soft_values(self, toy):
        q = soft_value_iteration(toy).Q["s_0"]
        assert q["A_1"] == pytest.approx(-0.603, abs=1e-3)
        assert q["A_2"] == pytest.approx(-0.304, abs=1e-3)

    def test_plain_greedy(self, toy):
        assert plain_value_iteration(toy).greedy["s_0"] == {"A_1"}


class TestAlphaScaling:
    def test_identity(self, toy):
        assert alpha_scaled_toy(1.0) == toy

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_ordering_preserved(self, alpha):
        assert soft_margin(alpha_scaled_toy(alpha)) > 0

    def test_homogeneity(self, toy):
        base = soft_value_iteration(toy).Q
        scaled = soft_value_iteration(alpha_scaled_toy(2.0)).Q
        for sid in base:
            for aid in base[sid]:
                assert scaled[sid][aid] == pytest.approx(2 * base[sid][aid], abs=1e-9)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            alpha_scaled_toy(0.0)


class TestMisleadingInterval:
    def test_paper_toy(self, toy):
        lo, hi = misleading_reward_interval(toy, 1.0)
        assert lo == pytest.approx(math.log(0.2 * math.e + 1.8 * math.exp(-20)) - math.log(2), abs=1e-12)
        assert lo == pytest.approx(-1.3026, abs=1e-4)
        assert hi == 1.0
        assert lo < -1.0 < hi

    @pytest.mark.parametrize("alpha", [0.5, 10.0])
    def test_interior_flips(self, alpha):
        lo, hi = misleading_reward_interval(build_toy(alpha=alpha), alpha)
        assert lo < hi
        for r in np.linspace(lo, hi, 7)[1:-1]:
            m = build_toy(r_b_minus=float(r), alpha=alpha)
            assert soft_margin(m) > 0
            assert plain_value_iteration(m).greedy["s_0"] == {"A_1"}
        outside = build_toy(r_b_minus=lo - 0.05, alpha=alpha)
        assert soft_margin(outside) < 0

    def test_boundary_continuity(self, toy):
        lo, _ = misleading_reward_interval(toy)
        assert abs(soft_margin(build_toy(r_b_minus=lo + 1e-9))) < 1e-6


class TestGaussianToy:
    def test_zero_alpha_matches_region_probabilities(self):
        g = GaussianPolicyParams(0.013, 0.027)
        b = GaussianPolicyParams(0.016, 0.877)
        q1, q2 = toy_gaussian_values(g, b, alpha=0.0, n_samples=1_000_000, seed=3)
        assert q1 == pytest.approx(toy_gaussian_expected_q(g, "s_g"), abs=3e-3)
        assert q2 == pytest.approx(toy_gaussian_expected_q(b, "s_b"), abs=1e-12)

    def test_point_mass_limit(self):
        g = GaussianPolicyParams(0.0, 1e-6)
        q1, _ = toy_gaussian_values(g, g, alpha=0.0, n_samples=100_000, seed=0)
        assert q1 == pytest.approx(0.99, abs=1e-3)

    def test_entropy_of_narrow_gaussian(self):
        # with a deterministic Q region the estimate reduces to Q + alpha * squashed entropy
        g = GaussianPolicyParams(0.0, 0.01)
        q1, _ = toy_gaussian_values(g, g, alpha=1.0, n_samples=200_000, seed=1)
        gauss_entropy = 0.5 * math.log(2 * math.pi * math.e * 0.01 ** 2)
        assert q1 == pytest.approx(0.99 * (1.0 + gauss_entropy - 1e-4), abs=2e-3)

    def test_seeded(self):
        assert toy_gaussian_values(n_samples=10_000, seed=5) == toy_gaussian_values(n_samples=10_000, seed=5)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            GaussianPolicyParams(0.0, 0.0)


class TestObstacle2D:
    def test_wall_hit(self):
        s, r = obstacle2d_step(Obstacle2DState((0.0, 0.0)), (3.0, 0.0))
        assert (s.outcome, r, s.done) == ("wall", -200.0, True)

    def test_goal(self):
        s, r = obstacle2d_step(Obstacle2DState((2.9, 0.0)), (0.1, 0.0))
        assert (s.outcome, r, s.done) == ("goal", 500.0, True)

    def test_progress_reward(self):
        s, r = obstacle2d_step(Obstacle2DState((0.0, 2.5)), (3.0, 0.0))
        assert r == pytest.approx(math.sqrt(9 + 6.25) - 2.5, abs=1e-12)
        assert r == pytest.approx(1.40512, abs=1e-5)
        assert s.outcome == "running"

    def test_wall_endpoint_closed(self):
        assert crosses_wall((1.0, 2.0), (3.0, 2.0))
        assert not crosses_wall((1.0, 2.0 + 1e-12), (3.0, 2.0 + 1e-12))
        assert crosses_wall((1.0, 0.0), (2.0, 0.0))

    def test_timeout(self):
        s = Obstacle2DState((0.0, 3.0), steps=49)
        s, _ = obstacle2d_step(s, (0.0, 0.5))
        assert s.outcome == "timeout"

    def test_bad_action(self):
        with pytest.raises(ValueError):
            obstacle2d_step(Obstacle2DState(), (3.5, 0.0))
        with pytest.raises(ValueError):
            obstacle2d_step(Obstacle2DState(outcome="goal"), (0.0, 0.0))

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(st.floats(-1, 4), st.floats(-4, 4)), st.tuples(st.floats(-1, 4), st.floats(-4, 4)))
    def test_crossing_symmetric(self, p, q):
        assert crosses_wall(p, q) == crosses_wall(q, p)


@pytest.fixture(scope="module")
def grid():
    return discretize_obstacle2d(20)


class TestDiscretizedObstacle:
    def test_valid(self, grid):
        assert validate(grid).ok

    def test_start_cell_wall(self, grid):
        start = grid[grid.start_state]
        atom = start.atoms[0]
        assert atom.transitions == {"wall": 1.0} and atom.reward == -200.0

    def test_route_exists(self, grid):
        assert plain_value_iteration(grid).V[grid.start_state] > 0

    def test_small_grid(self):
        with pytest.raises(ValueError):
            discretize_obstacle2d(3)


class TestTrapChain:
    def test_length3(self):
        chain, ext, rep = build_trap_chain(3)
        assert rep.j_plus == pytest.approx(2.9701, abs=1e-12)
        assert rep.j_minus == pytest.approx(-2.9701, abs=1e-12)
        assert ext.metadata["seed"] == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_certificates(self, seed):
        chain, ext, rep = build_trap_chain(4, seed=seed)
        assert rep.kl_at_target < 1e-6 and rep.plain_q_residual < 1e-8
        soft = soft_value_iteration(ext)
        for sid in chain.nonterminal_ids:
            k = chain[sid].atom_index("detour")
            assert soft.policy[sid][k] >= 0.98
        plain = plain_value_iteration(ext)
        for sid in chain.nonterminal_ids:
            assert plain.greedy[sid] == {"advance"}
        assert plain.V[chain.start_state] == pytest.approx(1 + 0.99 + 0.99 ** 2 + 0.99 ** 3, abs=1e-12)

    def test_short(self):
        with pytest.raises(ValueError):
            build_trap_chain(1)
