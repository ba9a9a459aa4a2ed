import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rows
from powersmc.cost import CostLedger
from powersmc.errors import InputError, ModelSpecError, SupportError
from powersmc.lm import (
    SyntheticLogitModel,
    TabularModel,
    Vocabulary,
    sequence_logprob,
    state_from_prefix,
    uniform_model,
)
from powersmc.smc import (
    DiagnosticsTrace,
    EngineConfig,
    Ensemble,
    ProposalPolicy,
    RampSchedule,
    TraceRow,
    apply_ramp_boundary,
    estimate_normalizer,
    incremental_logweight,
    incremental_logweights,
    log_second_moment,
    maybe_resample,
    propose_token,
    run_power_smc,
    run_sis,
    smc_step,
)
from powersmc.target import enumerate_target, path_weight_decomposition, power_normalizer

ROW = np.log([0.5, 0.3, 0.2])


def synthetic(t_cap=12, seed=3):
    return SyntheticLogitModel(Vocabulary(6, 6), t_cap, scale=2.5, eos_bias=-1.5, seed=seed)


class TestProposal:
    def test_squared_hand_value(self):
        q = np.exp(ProposalPolicy(2.0).log_probs(ROW))
        np.testing.assert_allclose(q, [0.25 / 0.38, 0.09 / 0.38, 0.04 / 0.38], atol=1e-15)
        np.testing.assert_allclose(q, [0.6579, 0.2368, 0.1053], atol=5e-5)

    def test_beta_one_is_base(self):
        np.testing.assert_allclose(ProposalPolicy(1.0).log_probs(ROW), ROW, atol=1e-15)

    def test_floor_keeps_support(self):
        row = np.array([0.0, -np.inf, -np.inf])
        lq = ProposalPolicy(2.0, floor=0.1).log_probs(row)
        assert np.all(np.isfinite(lq))
        assert np.exp(lq).sum() == pytest.approx(1.0)

    def test_dead_row(self):
        with pytest.raises(ModelSpecError):
            ProposalPolicy(2.0).log_probs(np.full(3, -np.inf))

    @pytest.mark.parametrize("beta,floor", [(0.0, 0.0), (-1.0, 0.0), (np.inf, 0.0), (1.0, 1.0)])
    def test_invalid(self, beta, floor):
        with pytest.raises(InputError):
            ProposalPolicy(beta, floor)

    def test_propose_frequencies(self):
        rng = np.random.default_rng(0)
        draws = [propose_token(ROW, ProposalPolicy(2.0), rng)[0] for _ in range(20_000)]
        freq = np.bincount(draws, minlength=3) / len(draws)
        np.testing.assert_allclose(freq, [0.25 / 0.38, 0.09 / 0.38, 0.04 / 0.38], atol=0.015)

    def test_propose_never_zero_mass(self):
        row = np.array([np.log(0.5), -np.inf, np.log(0.5)])
        rng = np.random.default_rng(1)
        assert all(propose_token(row, ProposalPolicy(3.0), rng)[0] != 1 for _ in range(2000))


class TestWeights:
    def test_base_proposal_hand_value(self):
        # p = q = 0.75, alpha = 2 -> 2 log .75 - log .75
        assert incremental_logweight(np.log(0.75), np.log(0.75), 2.0) == pytest.approx(np.log(0.75))

    def test_zero_proposal(self):
        with pytest.raises(SupportError):
            incremental_logweight(-1.0, -np.inf, 2.0)
        with pytest.raises(SupportError):
            incremental_logweights(np.array([-1.0]), np.array([-np.inf]), 2.0)

    @pytest.mark.parametrize("alpha", [2.0, 4.0, 8.0])
    def test_zero_variance_under_optimal(self, alpha):
        for row in random_rows(np.random.default_rng(int(alpha)), 100):
            lq = ProposalPolicy(alpha).log_probs(row)
            w = incremental_logweights(row, lq, alpha)
            np.testing.assert_allclose(w, power_normalizer(row, alpha), atol=1e-12)

    def test_second_moment_minimised_at_optimum(self):
        alpha = 4.0
        row = ROW
        best = log_second_moment(row, alpha, ProposalPolicy(alpha))
        assert best == pytest.approx(2 * power_normalizer(row, alpha), abs=1e-12)
        for beta in (1.0, 2.0, 8.0):
            assert log_second_moment(row, alpha, ProposalPolicy(beta)) > best

    def test_second_moment_base_proposal(self):
        # q = p: sum p^(2 alpha - 1)
        row = np.log([0.5, 0.5])
        assert log_second_moment(row, 2.0, ProposalPolicy(1.0)) == pytest.approx(np.log(2 * 0.125))


class TestRamp:
    def test_linear(self):
        r = RampSchedule.linear(4.0, t_ramp=6, n_stages=3)
        assert r.alphas == (1.0, 2.0, 3.0, 4.0)
        assert r.boundaries == (0, 2, 4, 6)
        assert [r.stage_alpha(t) for t in range(1, 9)] == [1, 1, 2, 2, 3, 3, 4, 4]
        assert [r.dalpha_after(t) for t in range(0, 8)] == [0, 0, 1, 0, 1, 0, 1, 0]

    @pytest.mark.parametrize("alphas,bounds", [
        ((1.0,), (0,)),
        ((2.0, 3.0), (0, 1)),
        ((1.0, 1.0), (0, 1)),
        ((1.0, 2.0), (1, 2)),
        ((1.0, 2.0, 3.0), (0, 2, 2)),
    ])
    def test_invalid(self, alphas, bounds):
        with pytest.raises(InputError):
            RampSchedule(alphas, bounds)

    def test_config_must_end_at_alpha(self):
        with pytest.raises(InputError):
            EngineConfig(alpha=3.0, ramp=RampSchedule.linear(4.0, 4))

    def test_beyond_horizon(self):
        cfg = EngineConfig(n_particles=4, alpha=4.0, ramp=RampSchedule.linear(4.0, 20))
        with pytest.raises(InputError):
            run_power_smc(synthetic(t_cap=8), cfg)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.floats(1.5, 8.0))
    def test_telescoping_with_shared_draws(self, seed, stages, alpha):
        model = synthetic()
        fixed = ProposalPolicy(1.3)
        ramp = RampSchedule.linear(alpha, t_ramp=stages * 2, n_stages=stages)
        direct = run_sis(model, EngineConfig(n_particles=32, alpha=alpha, seed=seed, proposal=fixed))
        ramped = run_sis(model, EngineConfig(n_particles=32, alpha=alpha, seed=seed, proposal=fixed, ramp=ramp))
        assert direct.ensemble.prefixes == ramped.ensemble.prefixes
        np.testing.assert_allclose(ramped.ensemble.log_weights, direct.ensemble.log_weights, atol=1e-10, rtol=0)

    def test_boundary_reweighting(self):
        ens = Ensemble.initial(uniform_model(2, 4), 3)
        ens.cum_logp[:] = [-1.0, -2.0, 0.0]
        apply_ramp_boundary(ens, 0.5)
        np.testing.assert_allclose(ens.log_weights, [-0.5, -1.0, 0.0])
        with pytest.raises(InputError):
            apply_ramp_boundary(ens, -0.1)


class TestEngine:
    def test_rng_isolated_from_alpha(self):
        a = run_sis(synthetic(), EngineConfig(n_particles=16, alpha=2.0, seed=5, proposal=ProposalPolicy(1.0)))
        b = run_sis(synthetic(), EngineConfig(n_particles=16, alpha=6.0, seed=5, proposal=ProposalPolicy(1.0)))
        assert a.ensemble.prefixes == b.ensemble.prefixes

    def test_reproducible(self):
        cfg = EngineConfig(n_particles=64, alpha=4.0, seed=9)
        a, b = run_power_smc(synthetic(), cfg), run_power_smc(synthetic(), cfg)
        assert a.sample == b.sample
        assert a.trace.to_csv() == b.trace.to_csv()
        assert a.ensemble.resample_log == b.ensemble.resample_log

    def test_absorption(self):
        model = synthetic()
        ens = Ensemble.initial(model, 50)
        cfg = EngineConfig(n_particles=50, alpha=2.0, seed=2)
        frozen = {}
        for _ in range(model.t_cap):
            smc_step(ens, model, cfg)
            for i in np.flatnonzero(ens.done):
                snap = (ens.prefixes[i], ens.log_weights[i], ens.cum_logp[i])
                assert frozen.setdefault(i, snap) == snap
        assert ens.done.all()
        for p in ens.prefixes:
            assert p[-1] == model.eos_id and model.eos_id not in p[:-1]

    def test_step_beyond_horizon(self):
        model = uniform_model(2, 2)
        ens = Ensemble.initial(model, 2)
        cfg = EngineConfig(n_particles=2)
        smc_step(ens, model, cfg)
        smc_step(ens, model, cfg)
        with pytest.raises(InputError):
            smc_step(ens, model, cfg)

    def test_state_and_cum_logp_track_prefix(self):
        model = synthetic()
        res = run_power_smc(model, EngineConfig(n_particles=40, alpha=4.0, seed=1, verify_states=True))
        for p, s, c in zip(res.ensemble.prefixes, res.ensemble.states, res.ensemble.cum_logp):
            assert s == state_from_prefix(model, p)
            assert c == pytest.approx(sequence_logprob(model, p), abs=1e-10)

    def test_single_particle(self):
        res = run_power_smc(synthetic(), EngineConfig(n_particles=1, alpha=4.0, seed=0))
        assert res.trace.num_resamples == 0
        assert res.sample == res.ensemble.prefixes[0]

    def test_deterministic_model(self):
        m = TabularModel(Vocabulary(2, 2), 5, {(): [1.0, 0.0, 0.0], (0,): [0.0, 1.0, 0.0]}, default=[0, 0, 1])
        res = run_power_smc(m, EngineConfig(n_particles=20, alpha=4.0, seed=0))
        assert set(res.ensemble.prefixes) == {(0, 1, 2)}
        np.testing.assert_allclose(res.ensemble.log_weights, 0.0, atol=1e-15)
        assert res.trace.num_resamples == 0
        assert res.sample == (0, 1, 2)

    def test_resets_after_resample(self):
        model = synthetic()
        events = []
        cfg = EngineConfig(n_particles=64, alpha=8.0, kappa=0.9, seed=4, proposal=ProposalPolicy(1.0))
        run_power_smc(model, cfg, on_resample=lambda e: events.append(e.log_weights.copy()))
        assert events
        for w in events:
            assert np.all(w == 0.0)

    def test_maybe_resample_respects_threshold(self):
        model = uniform_model(2, 4)
        ens = Ensemble.initial(model, 4)
        ens.log_weights = np.log([0.4, 0.3, 0.2, 0.1])
        fired, _ = maybe_resample(ens, EngineConfig(n_particles=4, kappa=0.5))
        assert not fired and ens.last_ess == pytest.approx(1 / 0.3)
        fired, ens = maybe_resample(ens, EngineConfig(n_particles=4, kappa=0.9))
        assert fired and len(ens.resample_log) == 1

    def test_sis_never_resamples(self):
        res = run_sis(synthetic(), EngineConfig(n_particles=64, alpha=8.0, seed=0, proposal=ProposalPolicy(1.0)))
        assert res.trace.num_resamples == 0

    def test_ledger_all_active(self):
        model = synthetic(t_cap=10)
        res = run_sis(model, EngineConfig(n_particles=30, alpha=2.0, seed=0))
        assert res.ledger.worst_case_evals == 30 * 10
        assert res.ledger.token_evals <= 30 * 10
        assert res.ledger.token_evals == sum(len(p) for p in res.ensemble.prefixes)

    def test_sis_weights_under_optimal_match_path_report(self, oracle):
        res = run_sis(oracle, EngineConfig(n_particles=200, alpha=4.0, seed=3))
        for p, w in zip(res.ensemble.prefixes, res.ensemble.log_weights):
            assert w == pytest.approx(path_weight_decomposition(oracle, 4.0, p).total, abs=1e-10)


class TestNormalizer:
    def test_empty(self):
        with pytest.raises(InputError):
            estimate_normalizer(DiagnosticsTrace())

    def test_sum_of_increments(self):
        tr = DiagnosticsTrace([TraceRow(1, 1.0, False, 2.0, -0.5, 0), TraceRow(2, 1.0, True, 2.0, -0.25, 1)])
        assert estimate_normalizer(tr, log=True) == -0.75
        assert estimate_normalizer(tr) == pytest.approx(math.exp(-0.75))

    def test_matches_sis_mean_weight(self, oracle):
        res = run_sis(oracle, EngineConfig(n_particles=500, alpha=4.0, seed=0, proposal=ProposalPolicy(1.0)))
        assert estimate_normalizer(res.trace) == pytest.approx(res.normalizer, rel=1e-12)

    def test_two_sequence_mean(self, two_seq):
        est = [estimate_normalizer(run_power_smc(two_seq, EngineConfig(
            n_particles=8, alpha=2.0, seed=s, kappa=0.9, proposal=ProposalPolicy(1.0))).trace)
            for s in range(400)]
        se = np.std(est, ddof=1) / np.sqrt(len(est))
        assert abs(np.mean(est) - 0.625) < 3 * se

    def test_exact_under_optimal_single_step(self):
        m = TabularModel(Vocabulary(3, 3), 2, {(): [0.5, 0.3, 0.2, 0.0]}, default=[0, 0, 0, 1])
        res = run_sis(m, EngineConfig(n_particles=7, alpha=2.0, seed=0))
        assert res.normalizer == pytest.approx(np.exp(enumerate_target(m, 2.0).log_Z), rel=1e-12)


class TestSampleSet:
    def test_csv_aggregates(self, two_seq):
        res = run_sis(two_seq, EngineConfig(n_particles=50, alpha=2.0, seed=0))
        lines = res.samples.to_csv().splitlines()
        assert lines[0] == "sequence,log_p,log_pi_alpha,weight,terminated"
        assert len(lines) == 1 + len(set(res.ensemble.prefixes))

    def test_unterminated_flag(self):
        m = uniform_model(2, 6, allow_eos=False)
        res = run_power_smc(m, EngineConfig(n_particles=4, alpha=2.0, t_max=3, seed=0))
        assert not res.ensemble.done.any()
        assert len(res.sample) == 3
        assert all(line.endswith(",0") for line in res.ensemble.sample_set().to_csv().splitlines()[1:])
