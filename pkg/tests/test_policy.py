"""Policy head, reparameterized sampling, rollout bookkeeping, teacher
forcing, and intervention contracts."""

import numpy as np
import pytest

from latentflow.backbone import RoleSchedule, StreamConfig, init_backbone_params
from latentflow.engine import Tensor, no_grad
from latentflow.numerics import DiagGaussian, finite_diff_check, gaussian_logprob_normalized
from latentflow.params import Parameters
from latentflow.policy import (
    SIGMA_FLOOR,
    init_policy_params,
    intervene,
    policy_step,
    run_rollout,
    sample_reparam,
    teacher_length_rollout,
)

CFG = StreamConfig(d_model=32, n_layers=2, n_heads=4, vocab_size=31, max_positions=48)
PROMPT = [0, 3, 9, 4, 1]


def make_params(seed=0):
    params = Parameters()
    init_backbone_params(params, CFG, d_v=16, seed=seed)
    init_policy_params(params, CFG.d_model, seed=seed)
    return params


class TestPolicyStep:
    def test_sigma_floor_holds_under_fuzz(self):
        params = make_params()
        rng = np.random.default_rng(0)
        with no_grad():
            for _ in range(200):
                g = policy_step(params, Tensor(rng.standard_normal(CFG.d_model) * 5))
                assert np.all(g.std.data >= SIGMA_FLOOR)

    def test_identical_h_identical_gaussian(self):
        params = make_params()
        h = Tensor(np.random.default_rng(1).standard_normal(CFG.d_model))
        with no_grad():
            g1, g2 = policy_step(params, h), policy_step(params, h)
        np.testing.assert_array_equal(g1.mean.data, g2.mean.data)
        np.testing.assert_array_equal(g1.std.data, g2.std.data)

    def test_mu_gradient_wrt_h_passes_fd(self):
        params = make_params()
        probe = Parameters()
        h = probe.add("h", np.random.default_rng(2).standard_normal(CFG.d_model))
        w = np.random.default_rng(3).standard_normal(CFG.d_model)

        def loss():
            g = policy_step(params, h)
            return (g.mean * w).sum() + (g.std * w).sum() * 0.1

        assert finite_diff_check(loss, probe, tol=1e-6, n_coords=8).passed


class TestReparam:
    def test_zero_eps_gives_mean(self):
        g = DiagGaussian(Tensor(np.arange(4.0)), Tensor(np.ones(4)))
        np.testing.assert_array_equal(sample_reparam(g, np.zeros(4)).data, np.arange(4.0))

    def test_unit_eps_unit_sigma(self):
        g = DiagGaussian(Tensor(np.arange(4.0)), Tensor(np.ones(4)))
        np.testing.assert_array_equal(sample_reparam(g, np.ones(4)).data, np.arange(4.0) + 1)

    def test_dz_dsigma_is_eps(self):
        probe = Parameters()
        sig = probe.add("sig", np.ones(4))
        eps = np.array([0.3, -0.7, 2.0, 0.0])
        z = sample_reparam(DiagGaussian(Tensor(np.zeros(4)), sig), eps)
        z.sum().backward()
        np.testing.assert_allclose(sig.grad, eps, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            sample_reparam(DiagGaussian(Tensor(np.zeros(3)), Tensor(np.ones(3))), np.zeros(4))


class TestRollout:
    def test_mean_mode_deterministic(self):
        params = make_params()
        with no_grad():
            a = run_rollout(params, CFG, RoleSchedule(), PROMPT, mode="mean")
            b = run_rollout(params, CFG, RoleSchedule(), PROMPT, mode="mean")
        assert a.rollout.T == b.rollout.T
        for s, t in zip(a.rollout.steps, b.rollout.steps):
            np.testing.assert_array_equal(s.z.data, t.z.data)
        np.testing.assert_array_equal(a.H.data, b.H.data)

    def test_all_unit_bounds_force_T4(self):
        params = make_params()
        sched = RoleSchedule(bounds={r: (1, 1) for r in ("plan", "draft", "diagnosis", "refine")})
        with no_grad():
            res = run_rollout(params, CFG, sched, PROMPT, mode="mean")
        assert res.rollout.T == 4
        assert [s.role for s in res.rollout.steps] == ["plan", "draft", "diagnosis", "refine"]

    def test_seeded_stochastic_reproducibility(self):
        params = make_params()
        with no_grad():
            a = run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=42)
            b = run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=42)
        assert a.rollout.T == b.rollout.T
        np.testing.assert_array_equal(a.rollout.logprobs(), b.rollout.logprobs())
        for s, t in zip(a.rollout.steps, b.rollout.steps):
            np.testing.assert_array_equal(s.z.data, t.z.data)

    def test_termination_within_bounds_sweep(self):
        params = make_params()
        sched = RoleSchedule()
        with no_grad():
            for seed in range(30):
                res = run_rollout(params, CFG, sched, PROMPT, seed=seed)
                assert sched.min_total <= res.rollout.T <= sched.max_total
                assert sum(res.rollout.role_lengths.values()) == res.rollout.T
                draft = [s for s in res.rollout.steps if s.role == "draft"]
                assert len(draft) == 1

    def test_logprob_bookkeeping_recomputes(self):
        params = make_params()
        with no_grad():
            res = run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=7)
        for s in res.rollout.steps:
            re = gaussian_logprob_normalized(
                Tensor(s.z.data), DiagGaussian(Tensor(s.mu.data), Tensor(s.sigma.data))
            )
            assert abs(float(re.data) - float(s.logprob.data)) < 1e-9

    def test_halting_queried_only_where_decisions_exist(self):
        params = make_params()
        with no_grad():
            res = run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=1)
        for s in res.rollout.steps:
            lo, hi = RoleSchedule().bounds[s.role]
            if lo == hi:
                assert s.halt_logit is None
            elif s.step >= lo:
                assert s.halt_logit is not None and s.halt_logprob is not None


class TestTeacherForcing:
    def test_forced_lengths_realized(self):
        params = make_params()
        lengths = {"plan": 2, "draft": 1, "diagnosis": 1, "refine": 1}
        with no_grad():
            res = teacher_length_rollout(params, CFG, RoleSchedule(), PROMPT, lengths, seed=3)
        assert res.rollout.T == 5
        assert [s.role for s in res.rollout.steps] == ["plan", "plan", "draft", "diagnosis", "refine"]
        assert res.rollout.role_lengths == lengths

    def test_out_of_bounds_rejected(self):
        params = make_params()
        with pytest.raises(ValueError):
            teacher_length_rollout(
                params, CFG, RoleSchedule(), PROMPT, {"plan": 9, "draft": 1, "diagnosis": 1, "refine": 1}
            )

    def test_eps_stream_independent_of_forcing(self):
        params = make_params()
        lengths = {"plan": 3, "draft": 1, "diagnosis": 2, "refine": 1}
        with no_grad():
            forced = teacher_length_rollout(params, CFG, RoleSchedule(), PROMPT, lengths, seed=11)
            free = run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=11)
        forced_eps = {(s.role, s.step): s.eps for s in forced.rollout.steps}
        free_eps = {(s.role, s.step): s.eps for s in free.rollout.steps}
        for key in set(forced_eps) & set(free_eps):
            np.testing.assert_array_equal(forced_eps[key], free_eps[key])

    def test_halt_logits_present_for_supervision(self):
        params = make_params()
        lengths = {"plan": 4, "draft": 1, "diagnosis": 3, "refine": 1}
        with no_grad():
            res = teacher_length_rollout(params, CFG, RoleSchedule(), PROMPT, lengths, seed=0)
        plan_logits = [s.halt_logit for s in res.rollout.steps if s.role == "plan" and s.step >= 1]
        assert all(l is not None for l in plan_logits)


class TestInterventions:
    def _rollout(self, params, seed=5):
        with no_grad():
            return run_rollout(params, CFG, RoleSchedule(), PROMPT, seed=seed)

    def test_zero_mode_zeroes_every_action(self):
        params = make_params()
        res = self._rollout(params)
        with no_grad():
            out = intervene(params, CFG, RoleSchedule(), res, "zero")
        assert all(np.linalg.norm(s.z.data) == 0.0 for s in out.rollout.steps)
        assert out.rollout.T == res.rollout.T

    def test_random_mode_matches_norms(self):
        params = make_params()
        res = self._rollout(params)
        with no_grad():
            out = intervene(params, CFG, RoleSchedule(), res, "random", seed=2)
        for a, b in zip(res.rollout.steps, out.rollout.steps):
            assert np.linalg.norm(b.z.data) == pytest.approx(np.linalg.norm(a.z.data), abs=1e-6)
            assert not np.allclose(a.z.data, b.z.data)

    def test_shuffle_preserves_multiset_and_T(self):
        params = make_params()
        res = self._rollout(params)
        with no_grad():
            out = intervene(params, CFG, RoleSchedule(), res, "shuffle_roles", seed=3)
        assert out.rollout.T == res.rollout.T
        orig = sorted(tuple(s.z.data) for s in res.rollout.steps)
        new = sorted(tuple(s.z.data) for s in out.rollout.steps)
        assert orig == new
        # non-identity permutation of contents
        assert any(
            not np.array_equal(a.z.data, b.z.data) for a, b in zip(res.rollout.steps, out.rollout.steps)
        )
        assert out.rollout.role_lengths == res.rollout.role_lengths

    def test_shuffle_needs_two_nondraft_roles(self):
        params = make_params()
        sched = RoleSchedule(active=("draft", "refine"))
        with no_grad():
            res = run_rollout(params, CFG, sched, PROMPT, seed=1)
        with pytest.raises(ValueError):
            intervene(params, CFG, sched, res, "shuffle_roles")

    def test_interventions_change_H(self):
        params = make_params()
        res = self._rollout(params)
        for mode in ("zero", "random", "shuffle_roles"):
            with no_grad():
                out = intervene(params, CFG, RoleSchedule(), res, mode, seed=1)
            assert not np.allclose(out.H.data, res.H.data), mode

    def test_deterministic_given_seed(self):
        params = make_params()
        res = self._rollout(params)
        with no_grad():
            a = intervene(params, CFG, RoleSchedule(), res, "random", seed=9)
            b = intervene(params, CFG, RoleSchedule(), res, "random", seed=9)
        np.testing.assert_array_equal(a.H.data, b.H.data)
