import math

import numpy as np
import pytest
from scipy import stats

from simtrace.distributions import Distribution
from simtrace.endpoints import InProcessEndpoint, connect_endpoint, sample_prior
from simtrace.gateway import Guided, Prior, Replay, RunAborted
from simtrace.models import cascade_model, conjugate_model, get_model
from simtrace.rng import CounterRng, RunRng
from simtrace.trace import EntryKind, log_joint
from simtrace.values import Value
from simtrace.wire import ProtocolError

X_ADDR = "conjugate_gaussian.run/latent_mean/Normal"


class TestPriorExecution:
    def test_conjugate_structure(self, conjugate_endpoint):
        traces = sample_prior(conjugate_endpoint, 10, seed=7)
        for t in traces:
            assert len(t.latents()) == 1
            assert len(t.observed()) == 1
            assert t.latents()[0].address.full == X_ADDR
            assert t.latents()[0].address.instance == 1
        assert len({t.type_id for t in traces}) == 1

    def test_same_seed_identical(self, conjugate_endpoint):
        a = sample_prior(conjugate_endpoint, 8, seed=7)
        b = sample_prior(InProcessEndpoint(conjugate_model()), 8, seed=7)
        assert [t.latents()[0].value for t in a] == [t.latents()[0].value for t in b]
        assert sorted(t.type_id for t in a) == sorted(t.type_id for t in b)

    def test_different_seed_differs(self, conjugate_endpoint):
        a = sample_prior(conjugate_endpoint, 4, seed=7)
        b = sample_prior(conjugate_endpoint, 4, seed=8)
        assert [t.latents()[0].value for t in a] != [t.latents()[0].value for t in b]

    def test_n_zero(self, conjugate_endpoint):
        assert sample_prior(conjugate_endpoint, 0, seed=1) == []

    def test_prior_marginal_ks(self, conjugate_endpoint):
        xs = np.array([t.latents()[0].value.as_float()
                       for t in sample_prior(conjugate_endpoint, 10_000, seed=2)])
        assert stats.kstest(xs, stats.norm(0, 1).cdf).pvalue > 0.01

    def test_cascade_channel_frequencies(self, cascade_endpoint):
        traces = sample_prior(cascade_endpoint, 10_000, seed=3)
        chans = np.array([t.control_latents()[0].value.as_int() for t in traces])
        freq = np.bincount(chans, minlength=4) / len(chans)
        for p, f in zip((0.4, 0.3, 0.2, 0.1), freq):
            sigma = math.sqrt(p * (1 - p) / len(chans))
            assert abs(f - p) < 3 * sigma

    def test_prior_observation_recorded(self, conjugate_endpoint):
        t = sample_prior(conjugate_endpoint, 1, seed=4)[0]
        assert t.observation is not None
        assert t.observed()[0].value == t.observation


class TestReplay:
    def test_replay_identity(self, cascade_endpoint):
        stored = sample_prior(cascade_endpoint, 5, seed=11)
        for i, t in enumerate(stored):
            r = cascade_endpoint.execute(t.observation, Replay.of_trace(t),
                                         RunRng(CounterRng(999), i))
            assert [e.value for e in r.entries] == [e.value for e in t.entries]
            assert log_joint(r) == log_joint(t)
            assert r.result == t.result

    def test_replay_missing_addresses_fall_back_to_prior(self, cascade_endpoint):
        t = sample_prior(cascade_endpoint, 1, seed=12)[0]
        # keep only the channel value; everything else redraws from the prior
        chan = t.control_latents()[0]
        policy = Replay({chan.address: [(chan.value, False)]})
        r = cascade_endpoint.execute(t.observation, policy, RunRng(CounterRng(5), 0))
        assert r.control_latents()[0].value == chan.value
        fresh = [e for e in r.entries if e.kind == EntryKind.LATENT and not e.reused]
        assert fresh  # prior fallbacks recorded as fresh

    def test_consumed_accounting(self, cascade_endpoint):
        t = sample_prior(cascade_endpoint, 1, seed=13)[0]
        r = cascade_endpoint.execute(t.observation, Replay.of_trace(t),
                                     RunRng(CounterRng(5), 0))
        consumed = r.replay_consumed
        by_key = {}
        for e in t.entries:
            if e.kind in (EntryKind.LATENT, EntryKind.REPLACED):
                by_key[e.address] = by_key.get(e.address, 0) + 1
        assert consumed == by_key


class TestGuided:
    def test_proposal_equal_prior_gives_likelihood_weight(self, conjugate_endpoint):
        prior_dist = Distribution.normal(0, 1)
        policy = Guided(lambda obs: (lambda addr, dist, control, replace: prior_dist))
        y = Value.f64(1.0)
        t = conjugate_endpoint.execute(y, policy, RunRng(CounterRng(21), 0))
        assert t.log_weight == pytest.approx(t.log_likelihood, abs=1e-12)
        assert t.log_weight_correction == pytest.approx(0.0, abs=1e-12)

    def test_log_weight_recomputation_identity(self, conjugate_endpoint):
        """log_weight == log_joint - sum log q recomputed from the trace."""
        proposal = Distribution.normal(0.5, 0.7)
        policy = Guided(lambda obs: (lambda addr, dist, control, replace: proposal))
        y = Value.f64(1.0)
        for i in range(20):
            t = conjugate_endpoint.execute(y, policy, RunRng(CounterRng(33), i))
            log_q = sum(proposal.log_prob(e.value) for e in t.control_latents())
            expected = log_joint(t) - log_q
            assert t.log_weight == pytest.approx(expected, abs=1e-10)

    def test_guided_skips_replace_sites(self, cascade_endpoint):
        narrow = Distribution.uniform(0.49, 0.51)
        calls = []

        def source(addr, dist, control, replace):
            calls.append((addr.full, control, replace))
            if "particle_energy" in addr.full:
                return Distribution.uniform(10.0, 11.0)
            return None

        t = cascade_endpoint.execute(None, Guided(lambda obs: source),
                                     RunRng(CounterRng(3), 0))
        energies = [e.value.as_float() for e in t.latents()
                    if "particle_energy" in e.address.full]
        assert all(10.0 <= e <= 11.0 for e in energies)
        # the guided source never proposes for replace redraws at one address
        scatter_calls = [c for c in calls if "scatter" in c[0]]
        assert scatter_calls  # it does see them (for state tracking)


class TestRunFailure:
    def test_simulator_exception_aborts_run(self):
        def broken(ctx):
            ctx.sample(Distribution.normal(0, 1), frames=["broken", "x"])
            raise RuntimeError("boom")

        ep = InProcessEndpoint(broken)
        with pytest.raises(RunAborted):
            ep.execute(None, Prior(), RunRng(CounterRng(1), 0))
        # endpoint stays usable for the next run
        def ok(ctx):
            ctx.sample(Distribution.normal(0, 1), frames=["broken", "x"])
            return Value.f64(0.0)
        ep2 = InProcessEndpoint(ok)
        t = ep2.execute(None, Prior(), RunRng(CounterRng(1), 0))
        assert len(t.latents()) == 1

    def test_unknown_endpoint_spec(self):
        with pytest.raises(ValueError):
            connect_endpoint("carrier-pigeon:coop")


class TestReplaceSemantics:
    def test_rejection_redraws_collapse_to_one_instance(self, cascade_endpoint):
        traces = sample_prior(cascade_endpoint, 50, seed=17)
        for t in traces:
            scatter = [e for e in t.entries if "scatter_accept" in e.address.full]
            accepted = [e for e in scatter if e.kind == EntryKind.LATENT]
            replaced = [e for e in scatter if e.kind == EntryKind.REPLACED]
            n_particles = len([e for e in t.latents()
                               if "particle_energy" in e.address.full])
            assert len(accepted) == n_particles
            assert len({e.address.instance for e in accepted}) == n_particles
            for r in replaced:
                assert any(a.address == r.address for a in accepted)

    def test_one_in_flight_run(self, conjugate_endpoint):
        def nested(ctx):
            with pytest.raises(ProtocolError):
                conjugate_endpoint.execute(None, Prior(), RunRng(CounterRng(2), 1))
            return Value.f64(0.0)

        ep = conjugate_endpoint
        # start a run whose model tries to start another run on the same endpoint
        original_model = ep._model
        ep._model = nested
        try:
            ep.execute(None, Prior(), RunRng(CounterRng(2), 0))
        finally:
            ep._model = original_model
