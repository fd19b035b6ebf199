"""Ghost schedule closed forms, policies, and terminal behavior."""

import math

import numpy as np
import pytest

from sparselab import ghost


class TestBetaSchedule:
    def test_start_value(self):
        assert ghost.beta_at(0, 30) == 1.0
        assert ghost.beta_at(0, 30, beta0=2.5) == 2.5

    def test_linear_midpoint(self):
        assert ghost.beta_at(15, 30, beta0=1.0, beta_max=10.0) == 5.5

    def test_relu_swap_at_t_end(self):
        assert ghost.beta_at(30, 30) == math.inf
        assert ghost.beta_at(31, 30) == math.inf

    def test_monotone_nondecreasing(self):
        vals = [ghost.beta_at(e, 40) for e in range(41)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_cosine_shape(self):
        assert ghost.beta_at(0, 30, shape="cosine") == 1.0
        assert ghost.beta_at(15, 30, shape="cosine") == pytest.approx(5.5)
        vals = [ghost.beta_at(e, 30, shape="cosine") for e in range(31)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            ghost.beta_at(0, 30, beta0=0.0)
        with pytest.raises(ValueError):
            ghost.beta_at(0, 0)
        with pytest.raises(ValueError):
            ghost.beta_at(-1, 30)


class TestAlphaSchedule:
    def test_endpoints(self):
        assert ghost.alpha_at(0, 30) == 1.0
        assert ghost.alpha_at(30, 30) == 0.0
        assert ghost.alpha_at(45, 30) == 0.0

    def test_linear_midpoint(self):
        assert ghost.alpha_at(15, 30) == 0.5

    def test_monotone_nonincreasing(self):
        vals = [ghost.alpha_at(e, 40) for e in range(41)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        cos_vals = [ghost.alpha_at(e, 40, shape="cosine") for e in range(41)]
        assert all(b <= a for a, b in zip(cos_vals, cos_vals[1:]))


class TestPolicies:
    def test_default_policy_anneals_to_first_milestone(self):
        pol = ghost.ghost_mode(ghost.GhostConfig(), (30, 45))
        assert pol.state_at(0) == ghost.GhostState(1.0, 1.0, "ghost", 30)
        st = pol.state_at(30)
        assert st.phase == "post_ghost" and st.alpha == 0.0 and st.beta == math.inf

    def test_keep_forever(self):
        pol = ghost.ghost_mode(ghost.GhostConfig(policy="keep_forever"), (30, 45))
        for e in (0, 29, 30, 59, 500):
            st = pol.state_at(e)
            assert st.alpha == 1.0 and st.beta == 1.0 and st.phase == "ghost"

    def test_abrupt_removal_step_function(self):
        pol = ghost.ghost_mode(ghost.GhostConfig(policy="abrupt_removal"), (30, 45))
        assert pol.state_at(29).alpha == 1.0
        assert pol.state_at(29).beta == 1.0
        assert pol.state_at(30).alpha == 0.0
        assert pol.state_at(30).beta == math.inf

    def test_ghost_at_second_decay(self):
        pol = ghost.ghost_mode(ghost.GhostConfig(policy="ghost_at_second_decay"), (30, 45))
        assert pol.state_at(44).alpha > 0.0
        assert pol.state_at(45).alpha == 0.0
        with pytest.raises(ghost.ConfigError):
            ghost.ghost_mode(ghost.GhostConfig(policy="ghost_at_second_decay"), (30,))

    def test_unknown_policy_rejected(self):
        with pytest.raises(ghost.ConfigError):
            ghost.GhostConfig(policy="linger")

    def test_post_ghost_invariant(self):
        for policy in ("ghost", "abrupt_removal", "ghost_at_second_decay"):
            pol = ghost.ghost_mode(ghost.GhostConfig(policy=policy), (10, 20))
            for e in range(60):
                st = pol.state_at(e)
                if st.phase == "post_ghost":
                    assert st.alpha == 0.0 and st.beta == math.inf


class TestSwapContinuity:
    def test_pswish_to_relu_deviation_bound(self):
        """At beta_max=10 the worst-case gap to relu is ~0.0279 < 0.05."""
        z = np.linspace(-10, 10, 20001)
        s = 1.0 / (1.0 + np.exp(-10.0 * z))
        dev = np.abs(z * s - np.maximum(z, 0.0))
        assert dev.max() <= 0.05
