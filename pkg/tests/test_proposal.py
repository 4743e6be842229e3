import math

import numpy as np
import pytest

from simtrace import tensor as T
from simtrace.addressing import Address
from simtrace.distributions import Distribution, DistTag
from simtrace.endpoints import InProcessEndpoint, sample_prior
from simtrace.engines import importance_sample
from simtrace.models import cascade_model, conjugate_model
from simtrace.proposal import (AddressSpec, NetworkConfig, ProposalNetwork,
                               UnknownAddress)
from simtrace.rng import CounterRng, RunRng
from simtrace.trace import EntryKind, Trace, TraceEntry
from simtrace.values import Value

TINY = dict(lstm_hidden=8, obs_embed_dim=4, sample_embed_dim=3,
            address_embed_dim=4, mixture_components=2, head_hidden=6,
            obs_embedder="mlp", obs_dim=1)


def make_trace(addr_values, observation=1.0):
    """Synthetic single-type trace over Normal(0,1) sites."""
    d = Distribution.normal(0, 1)
    t = Trace(observation=Value.f64(observation))
    for full, value in addr_values:
        e = TraceEntry(Address(full, 1), d, Value.f64(value),
                       d.log_prob(Value.f64(value)), EntryKind.LATENT)
        e.reused = False
        t.entries.append(e)
    return t.finalize()


def inv_softplus(y):
    return math.log(math.expm1(y))


class TestPregeneration:
    def test_registry_union(self):
        net = ProposalNetwork(NetworkConfig(**TINY))
        t1 = make_trace([("a/Normal", 0.1), ("b/Normal", 0.2)])
        t2 = make_trace([("a/Normal", 0.3), ("b/Normal", 0.1), ("c/Normal", 0.0)])
        from simtrace.training import pregenerate_layers
        net = pregenerate_layers([t1, t2], NetworkConfig(**TINY))
        assert set(net.layers) == {"a/Normal", "b/Normal", "c/Normal"}
        assert net.frozen

    def test_empty_dataset_core_only(self):
        from simtrace.training import pregenerate_layers
        net = pregenerate_layers([], NetworkConfig(**TINY))
        assert net.layers == {}
        core = ProposalNetwork(NetworkConfig(**TINY))
        assert net.parameter_count() == core.parameter_count()

    def test_param_count_monotone_in_dataset(self):
        from simtrace.training import pregenerate_layers
        pool = [f"site{k}/Normal" for k in range(12)]
        rng = np.random.default_rng(0)

        def corpus(n):
            out = []
            for i in range(n):
                k = 1 + int(rng.zipf(2.0)) % 12
                out.append(make_trace([(pool[j], 0.0) for j in range(k)]))
            return out

        small = pregenerate_layers(corpus(30), NetworkConfig(**TINY))
        large = pregenerate_layers(corpus(300), NetworkConfig(**TINY))
        assert large.parameter_count() >= small.parameter_count()
        assert len(large.layers) >= len(small.layers)

    def test_defaults_match_published_architecture(self):
        cfg = NetworkConfig()
        assert cfg.lstm_hidden == 512
        assert cfg.obs_embed_dim == 256
        assert cfg.sample_embed_dim == 4
        assert cfg.address_embed_dim == 64
        assert cfg.mixture_components == 10

    def test_desk_preset(self):
        cfg = NetworkConfig.desk_scale()
        assert cfg.lstm_hidden == 64
        assert cfg.obs_embed_dim == 32
        assert cfg.mixture_components == 5


class TestTraceLogQ:
    def _forced_net(self, std_target=1.0):
        """Head forced to emit the prior N(0,1) for every mixture component."""
        net = ProposalNetwork(NetworkConfig(**TINY))
        t = make_trace([("x/Normal", 0.37)])
        net.register_address("x/Normal", Distribution.normal(0, 1))
        net.freeze()
        layers = net.layers["x/Normal"]
        final = layers.head.layers[-1]
        final.W.data = np.zeros_like(final.W.data)
        k = net.config.mixture_components
        bias = np.zeros(3 * k)
        bias[2 * k:] = inv_softplus(std_target - 1e-4)
        final.b.data = bias
        return net, t

    def test_forced_head_matches_prior(self):
        net, t = self._forced_net()
        log_q = net.trace_log_q(t).item()
        prior = Distribution.normal(0, 1).log_prob(Value.f64(0.37))
        assert log_q == pytest.approx(prior, abs=1e-9)

    def test_categorical_head_saturation(self):
        net = ProposalNetwork(NetworkConfig(**TINY))
        d = Distribution.categorical([0.5, 0.5])
        net.register_address("k/Categorical", d)
        net.freeze()
        layers = net.layers["k/Categorical"]
        final = layers.head.layers[-1]
        final.W.data = np.zeros_like(final.W.data)
        final.b.data = np.array([60.0, -60.0])
        t = Trace(observation=Value.f64(0.0))
        e = TraceEntry(Address("k/Categorical", 1), d, Value.i64(0),
                       d.log_prob(Value.i64(0)), EntryKind.LATENT)
        e.reused = False
        t.entries.append(e)
        t.finalize()
        log_q = net.trace_log_q(t).item()
        assert -1e-20 < log_q <= 0.0

    def test_unknown_address_raises_when_frozen(self):
        net, _ = self._forced_net()
        t = make_trace([("y/Normal", 0.0)])
        with pytest.raises(UnknownAddress):
            net.batch_log_q([t])
        # the skip counter tracks traces discarded from minibatches
        before = net.skipped_unknown
        with pytest.raises(UnknownAddress):
            net.minibatch_loss([t])
        assert net.skipped_unknown == before + 1

    def test_random_init_finite(self, cascade_endpoint):
        from simtrace.training import pregenerate_layers
        traces = sample_prior(cascade_endpoint, 30, seed=50)
        net = pregenerate_layers(traces, NetworkConfig.desk_scale(
            obs_embedder="mlp", obs_dim=256))
        v = net.trace_log_q(traces[0]).item()
        assert math.isfinite(v)


@pytest.fixture(scope="module")
def net_and_corpus():
    ep = InProcessEndpoint(cascade_model())
    traces = sample_prior(ep, 120, seed=60)
    from simtrace.training import pregenerate_layers
    net = pregenerate_layers(traces, NetworkConfig.desk_scale(
        obs_embedder="mlp", obs_dim=256, lstm_hidden=16, obs_embed_dim=8,
        mixture_components=3, head_hidden=8, address_embed_dim=6))
    return net, traces


class TestMinibatchLoss:

    def test_sub_minibatch_partition(self, net_and_corpus):
        net, traces = net_and_corpus
        by_type = {}
        for t in traces:
            by_type.setdefault(t.type_id, []).append(t)
        types = sorted(by_type, key=lambda k: -len(by_type[k]))
        batch = by_type[types[0]][:2] + by_type[types[1]][:1]
        assert net.sub_minibatch_count(batch) == 2

    def test_loss_is_mean_of_singles(self, net_and_corpus):
        net, traces = net_and_corpus
        batch = traces[:16]
        batched = net.minibatch_loss(batch).item()
        singles = [net.minibatch_loss([t]).item() for t in batch]
        assert batched == pytest.approx(np.mean(singles), abs=1e-10)

    def test_batched_equals_one_by_one(self, net_and_corpus):
        net, traces = net_and_corpus
        same_type = [t for t in traces if t.type_id == traces[0].type_id][:6]
        batched = net.batch_log_q(same_type).item()
        single = sum(net.batch_log_q([t]).item() for t in same_type)
        assert batched == pytest.approx(single, abs=1e-10)

    def test_permutation_invariance(self, net_and_corpus):
        net, traces = net_and_corpus
        batch = traces[:24]
        loss1 = net.minibatch_loss(batch).item()
        rng = np.random.default_rng(1)
        for _ in range(3):
            perm = list(rng.permutation(len(batch)))
            loss2 = net.minibatch_loss([batch[i] for i in perm]).item()
            assert loss2 == pytest.approx(loss1, abs=1e-10)

    def test_empty_minibatch_rejected(self, net_and_corpus):
        net, _ = net_and_corpus
        with pytest.raises(ValueError):
            net.minibatch_loss([])

    def test_frozen_skips_unknown_trace(self, net_and_corpus):
        net, traces = net_and_corpus
        alien = make_trace([("somewhere/else/Normal", 0.0)])
        before = net.skipped_unknown
        loss_with = net.minibatch_loss(traces[:4] + [alien]).item()
        loss_without = net.minibatch_loss(traces[:4]).item()
        assert net.skipped_unknown == before + 1
        assert loss_with == pytest.approx(loss_without, abs=1e-12)


class TestHeadValidity:
    def test_random_parameters_emit_valid_distributions(self):
        cfg = NetworkConfig(**TINY)
        rng = np.random.default_rng(7)
        for trial in range(8):
            net = ProposalNetwork(NetworkConfig(**{**TINY, "init_seed": trial}))
            prior_u = Distribution.uniform(-3.0, 5.0)
            prior_n = Distribution.normal(1.0, 2.0)
            net.register_address("u/Uniform", prior_u)
            net.register_address("n/Normal", prior_n)
            # scramble every parameter with large values
            for _, p in net.params.items():
                p.data = rng.normal(scale=8.0, size=p.shape)
            for full, prior in (("u/Uniform", prior_u), ("n/Normal", prior_n)):
                layers = net.layers[full]
                h = rng.normal(size=net.config.lstm_hidden)
                prop = net._proposal_distribution(layers, h, prior)
                from simtrace.distributions import DefensiveMixture
                assert isinstance(prop, DefensiveMixture)
                assert prop.prior is prior
                mix = prop.proposal
                assert mix.weights.sum() == pytest.approx(1.0, abs=1e-9)
                assert np.all(mix.stds > 0)
                lo, hi = prior.support()
                assert (mix.low, mix.high) == (lo, hi)
                if math.isfinite(lo):
                    assert np.all(mix.means >= lo) and np.all(mix.means <= hi)

    def test_guided_consistency_with_training_path(self, cascade_endpoint):
        """With no defensive mixing, the incremental inference unroll scores
        exactly like the batched training unroll on the trace it produced."""
        from simtrace.training import pregenerate_layers
        traces = sample_prior(cascade_endpoint, 40, seed=61)
        net = pregenerate_layers(traces, NetworkConfig.desk_scale(
            obs_embedder="mlp", obs_dim=256, lstm_hidden=16, obs_embed_dim=8,
            mixture_components=3, head_hidden=8, address_embed_dim=6,
            defensive_eps=0.0))
        y = traces[0].observation
        for i in range(5):
            t = cascade_endpoint.execute(y, net.guided_policy(),
                                         RunRng(CounterRng(77), i))
            log_q = net.trace_log_q(t).item()
            log_p = sum(e.log_prob for e in t.latents()
                        if e.control and not e.replace
                        and net.layers[e.address.full].head is not None)
            assert t.log_weight_correction == pytest.approx(log_p - log_q, abs=1e-9)


class TestGradientCheck:
    def test_full_network_gradients_vs_finite_differences(self, cascade_endpoint):
        traces = sample_prior(cascade_endpoint, 12, seed=62)
        two = [traces[0], next(t for t in traces if t.type_id != traces[0].type_id)]
        from simtrace.training import pregenerate_layers
        net = pregenerate_layers(two, NetworkConfig(
            lstm_hidden=6, obs_embed_dim=4, sample_embed_dim=2,
            address_embed_dim=3, mixture_components=2, head_hidden=5,
            obs_embedder="mlp", obs_dim=256))

        def loss_fn():
            return net.minibatch_loss(two)

        net.params.zero_grads()
        with T.Tape() as tape:
            loss = loss_fn()
        T.backward(tape, loss)
        h = 1e-5
        worst = 0.0
        for name, p in net.params.items():
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                denom = max(abs(num), 1e-6)
                worst = max(worst, abs(got.reshape(-1)[i] - num) / denom)
        assert worst < 1e-4, worst


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path, cascade_endpoint):
        from simtrace.training import pregenerate_layers
        traces = sample_prior(cascade_endpoint, 30, seed=63)
        net = pregenerate_layers(traces, NetworkConfig.desk_scale(
            obs_embedder="mlp", obs_dim=256, lstm_hidden=12, obs_embed_dim=6,
            mixture_components=2, head_hidden=6, address_embed_dim=4))
        net.train_step = 41
        path = tmp_path / "ckpt.nta"
        net.save(path)
        back = ProposalNetwork.load(path)
        assert back.train_step == 41
        assert back.frozen
        assert set(back.layers) == set(net.layers)
        for (n1, p1), (n2, p2) in zip(net.params.items(), back.params.items()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data)
        t = traces[0]
        assert back.trace_log_q(t).item() == pytest.approx(
            net.trace_log_q(t).item(), abs=1e-12)

    def test_loaded_network_guides_inference(self, tmp_path, conjugate_endpoint):
        from simtrace.training import pregenerate_layers
        traces = sample_prior(conjugate_endpoint, 20, seed=64)
        net = pregenerate_layers(traces, NetworkConfig(**TINY))
        path = tmp_path / "c.nta"
        net.save(path)
        back = ProposalNetwork.load(path)
        ws = importance_sample(conjugate_endpoint, Value.f64(1.0), 50,
                               proposal=back, seed=1)
        assert len(ws) == 50
        assert np.all(np.isfinite(ws.log_weights))
