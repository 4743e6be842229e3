"""The amortized proposal network q(x | y).

A shared LSTM core consumes, at every latent site, the concatenation of an
observation embedding, the current address embedding and an embedding of
the previously sampled value. Its output feeds an address-specific proposal
head: a mixture of truncated normals on the request's support for interval
or unbounded continuous priors, or categorical logits for categorical
priors. Sites with other prior families (and rejection-loop redraws) are
never guided and keep their prior both in training and at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .addressing import Address, AddressDictionary
from .distributions import (DefensiveMixture, DistTag, Distribution,
                            TruncatedNormalMixture)
from .gateway import Guided
from .nn import Conv3dEmbedder, Linear, LSTM, MLP, ParamStore, load_archive, save_archive
from .trace import EntryKind, Trace
from .values import Value

STD_FLOOR = 1e-4


class UnknownAddress(KeyError):
    pass


@dataclass
class NetworkConfig:
    lstm_hidden: int = 512
    obs_embed_dim: int = 256
    sample_embed_dim: int = 4
    address_embed_dim: int = 64
    mixture_components: int = 10
    obs_embedder: str = "mlp"  # "mlp" or "cnn3d"
    obs_dim: int = 1
    obs_grid: tuple[int, int, int] = (8, 8, 4)
    cnn_preset: str = "desk"
    head_hidden: int = 0  # 0 -> same as lstm_hidden
    # prior fraction mixed into every emitted proposal; bounds importance
    # ratios by 1/eps so inference stays stable off the training distribution
    defensive_eps: float = 0.1
    init_seed: int = 20180815

    def __post_init__(self):
        for f_name in ("lstm_hidden", "obs_embed_dim", "sample_embed_dim",
                       "address_embed_dim", "mixture_components", "obs_dim"):
            if getattr(self, f_name) < 1:
                raise ValueError(f"{f_name} must be >= 1")

    @staticmethod
    def desk_scale(**overrides) -> "NetworkConfig":
        base = dict(lstm_hidden=64, obs_embed_dim=32, mixture_components=5,
                    sample_embed_dim=4, address_embed_dim=16, head_hidden=32)
        base.update(overrides)
        return NetworkConfig(**base)


@dataclass
class AddressSpec:
    """What the registry knows about one address."""
    full: str
    tag: int  # DistTag value of the prior at this address
    n_classes: int = 0  # categorical only
    head: str = "none"  # "interval", "unbounded", "categorical", "none"

    @staticmethod
    def of_distribution(full: str, dist: Distribution) -> "AddressSpec":
        t = dist.tag
        if t == DistTag.CATEGORICAL:
            return AddressSpec(full, int(t), n_classes=dist.n_classes, head="categorical")
        if t == DistTag.UNIFORM or t == DistTag.TRUNCATED_NORMAL:
            return AddressSpec(full, int(t), head="interval")
        if t == DistTag.NORMAL:
            return AddressSpec(full, int(t), head="unbounded")
        return AddressSpec(full, int(t), head="none")

    @property
    def value_dim(self) -> int:
        return self.n_classes if self.head == "categorical" else 1


def _standardize(values: np.ndarray, dists: list[Distribution], spec: AddressSpec) -> np.ndarray:
    """Map raw draw values to O(1) network inputs using the request priors."""
    if spec.head == "categorical":
        out = np.zeros((len(values), spec.n_classes))
        out[np.arange(len(values)), values.astype(int)] = 1.0
        return out
    t = DistTag(spec.tag)
    if t in (DistTag.UNIFORM, DistTag.TRUNCATED_NORMAL):
        lo = np.array([d.support()[0] for d in dists])
        hi = np.array([d.support()[1] for d in dists])
        return (((values - lo) / (hi - lo)) * 2.0 - 1.0)[:, None]
    if t == DistTag.NORMAL:
        mu = np.array([d.params[0] for d in dists])
        sd = np.array([d.params[1] for d in dists])
        return ((values - mu) / sd)[:, None]
    if t == DistTag.POISSON:
        rate = np.array([d.params[0] for d in dists])
        return (values / (1.0 + rate))[:, None]
    return values[:, None]


class _AddressLayers:
    def __init__(self, net: "ProposalNetwork", spec: AddressSpec, layer_id: int):
        cfg = net.config
        rng = np.random.default_rng((cfg.init_seed, 1, layer_id))
        store = net.params
        base = f"addr{layer_id}"
        self.spec = spec
        self.embedding = store.create(
            f"{base}.embed",
            rng.uniform(-0.5, 0.5, size=(1, cfg.address_embed_dim)))
        self.sample_embed = Linear(store, rng, spec.value_dim,
                                   cfg.sample_embed_dim, f"{base}.sample")
        hidden = cfg.head_hidden or cfg.lstm_hidden
        if spec.head == "categorical":
            self.head = MLP(store, rng, [cfg.lstm_hidden, hidden, spec.n_classes],
                            f"{base}.head")
        elif spec.head in ("interval", "unbounded"):
            self.head = MLP(store, rng,
                            [cfg.lstm_hidden, hidden, 3 * cfg.mixture_components],
                            f"{base}.head")
        else:
            self.head = None


class ProposalNetwork:
    def __init__(self, config: NetworkConfig):
        self.config = config
        self.params = ParamStore()
        self.dictionary = AddressDictionary()
        self.layers: dict[str, _AddressLayers] = {}
        self.frozen = False
        self.skipped_unknown = 0
        self.train_step = 0
        self.obs_shift = 0.0
        self.obs_scale = 1.0
        rng = np.random.default_rng((config.init_seed, 0))
        if config.obs_embedder == "cnn3d":
            self.obs_net = Conv3dEmbedder(self.params, rng, config.obs_grid,
                                          config.obs_embed_dim, "core.obs",
                                          preset=config.cnn_preset)
            self._obs_dim = int(np.prod(config.obs_grid))
        elif config.obs_embedder == "mlp":
            self.obs_net = MLP(self.params, rng,
                               [config.obs_dim, 2 * config.obs_embed_dim,
                                config.obs_embed_dim], "core.obs")
            self._obs_dim = config.obs_dim
        else:
            raise ValueError(f"unknown obs_embedder {config.obs_embedder!r}")
        in_dim = (config.obs_embed_dim + config.address_embed_dim
                  + config.sample_embed_dim)
        self.lstm = LSTM(self.params, rng, in_dim, config.lstm_hidden, "core.lstm")

    # ---- registry ----

    def register_address(self, full: str, dist: Distribution) -> _AddressLayers:
        if full in self.layers:
            return self.layers[full]
        if self.frozen:
            raise UnknownAddress(full)
        layer_id = self.dictionary.id_for(full)
        spec = AddressSpec.of_distribution(full, dist)
        layers = _AddressLayers(self, spec, layer_id)
        self.layers[full] = layers
        return layers

    def freeze(self):
        self.frozen = True

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    # ---- observation pipeline ----

    def set_obs_normalization(self, shift: float, scale: float):
        self.obs_shift = float(shift)
        self.obs_scale = float(scale) if scale > 0 else 1.0

    def _obs_array(self, observation: Optional[Value]) -> np.ndarray:
        if observation is None:
            return np.zeros(self._obs_dim)
        arr = observation.numeric()
        if arr.size != self._obs_dim:
            raise ValueError(f"observation has {arr.size} values, expected {self._obs_dim}")
        return (arr - self.obs_shift) / self.obs_scale

    def embed_observations(self, observations: list[Optional[Value]]) -> T.Tensor:
        batch = np.stack([self._obs_array(o) for o in observations])
        return self.obs_net(T.Tensor(batch))

    # ---- scoring ----

    def _step_input(self, batch: int, layers: _AddressLayers, obs_embed: T.Tensor,
                    prev: Optional[tuple[_AddressLayers, np.ndarray]]) -> T.Tensor:
        ones = T.Tensor(np.ones((batch, 1)))
        addr_part = T.matmul(ones, layers.embedding)
        if prev is None:
            sample_part = T.Tensor(np.zeros((batch, self.config.sample_embed_dim)))
        else:
            prev_layers, prev_input = prev
            sample_part = T.relu(prev_layers.sample_embed(T.Tensor(prev_input)))
        return T.concat([obs_embed, addr_part, sample_part], axis=1)

    def _head_log_q(self, layers: _AddressLayers, h: T.Tensor,
                    values: np.ndarray, dists: list[Distribution]) -> Optional[T.Tensor]:
        """(B,) log q of the stored values under the head output, or None."""
        spec = layers.spec
        if layers.head is None:
            return None
        out = layers.head(h)
        if spec.head == "categorical":
            logits = T.log_softmax(out, axis=1)
            onehot = np.zeros((len(values), spec.n_classes))
            onehot[np.arange(len(values)), values.astype(int)] = 1.0
            return T.tsum(T.mul(logits, T.Tensor(onehot)), axis=1)
        k = self.config.mixture_components
        log_w = T.log_softmax(T.narrow(out, 1, 0, k), axis=1)
        raw_m = T.narrow(out, 1, k, k)
        raw_s = T.narrow(out, 1, 2 * k, k)
        x = T.Tensor(values[:, None])
        if spec.head == "interval":
            lo = np.array([d.support()[0] for d in dists])[:, None]
            hi = np.array([d.support()[1] for d in dists])[:, None]
            width = T.Tensor(hi - lo)
            means = T.add(T.Tensor(lo), T.mul(T.sigmoid(raw_m), width))
            scale = T.mul(T.softplus(raw_s), T.Tensor((hi - lo) / math.sqrt(12.0)))
            stds = T.add(scale, T.Tensor(STD_FLOOR))
            z = T.div(T.sub(x, means), stds)
            log_phi = T.sub(T.mul(T.square(z), T.Tensor(-0.5)),
                            T.add(T.log(stds), T.Tensor(0.5 * math.log(2 * math.pi))))
            alpha = T.div(T.sub(T.Tensor(lo), means), stds)
            beta = T.div(T.sub(T.Tensor(hi), means), stds)
            z_mass = T.sub(T.normal_cdf(beta), T.normal_cdf(alpha))
            log_z = T.log(T.add(z_mass, T.Tensor(1e-300)))
            comp = T.sub(log_phi, log_z)
        else:  # unbounded
            mu0 = np.array([d.params[0] for d in dists])[:, None]
            sd0 = np.array([d.params[1] for d in dists])[:, None]
            means = T.add(T.Tensor(mu0), T.mul(raw_m, T.Tensor(sd0)))
            stds = T.add(T.mul(T.softplus(raw_s), T.Tensor(sd0)), T.Tensor(STD_FLOOR))
            z = T.div(T.sub(x, means), stds)
            comp = T.sub(T.mul(T.square(z), T.Tensor(-0.5)),
                         T.add(T.log(stds), T.Tensor(0.5 * math.log(2 * math.pi))))
        return T.logsumexp(T.add(log_w, comp), axis=1)

    def _proposal_distribution(self, layers: _AddressLayers, h: np.ndarray,
                               dist: Distribution):
        """Concrete proposal for one site at inference time (no tape)."""
        spec = layers.spec
        if layers.head is None:
            return None
        eps = self.config.defensive_eps
        out = layers.head(T.Tensor(h[None, :])).data[0]
        if spec.head == "categorical":
            z = out - out.max()
            probs = np.exp(z)
            probs /= probs.sum()
            if eps > 0:
                probs = (1.0 - eps) * probs + eps * dist.params
                probs = probs / probs.sum()
            return Distribution.categorical(probs)
        k = self.config.mixture_components
        logits, raw_m, raw_s = out[:k], out[k:2 * k], out[2 * k:3 * k]
        w = np.exp(logits - logits.max())
        w /= w.sum()
        if spec.head == "interval":
            lo, hi = dist.support()
            means = lo + _sigmoid_np(raw_m) * (hi - lo)
            stds = _softplus_np(raw_s) * (hi - lo) / math.sqrt(12.0) + STD_FLOOR
            mix = TruncatedNormalMixture(w, means, stds, lo, hi)
        else:
            mu0, sd0 = dist.params[0], dist.params[1]
            means = mu0 + raw_m * sd0
            stds = _softplus_np(raw_s) * sd0 + STD_FLOOR
            mix = TruncatedNormalMixture(w, means, stds, -math.inf, math.inf)
        if eps > 0:
            return DefensiveMixture(mix, dist, eps)
        return mix

    # ---- public scoring API ----

    def batch_log_q(self, traces: list[Trace]) -> T.Tensor:
        """Sum of log q over a batch of same-type traces (one unroll)."""
        seq = [e for e in traces[0].entries if e.kind == EntryKind.LATENT]
        batch = len(traces)
        per_trace = []
        for t in traces:
            lat = [e for e in t.entries if e.kind == EntryKind.LATENT]
            if len(lat) != len(seq) or any(a.address != b.address for a, b in zip(lat, seq)):
                raise ValueError("batch_log_q requires traces of one type")
            per_trace.append(lat)
        for e in seq:
            if e.address.full not in self.layers:
                if self.frozen:
                    raise UnknownAddress(e.address.full)
                self.register_address(e.address.full, e.distribution)
        obs_embed = self.embed_observations([t.observation for t in traces])
        state = self.lstm.initial_state(batch)
        prev = None
        total = T.Tensor(0.0)
        for t_idx, site in enumerate(seq):
            layers = self.layers[site.address.full]
            x = self._step_input(batch, layers, obs_embed, prev)
            h, state = self.lstm.step(x, state)
            values = np.array([lat[t_idx].value.as_float() for lat in per_trace])
            dists = [lat[t_idx].distribution for lat in per_trace]
            if not (site.control and not site.replace):
                contribution = None  # never guided; q factor equals the prior
            else:
                contribution = self._head_log_q(layers, h, values, dists)
            if contribution is not None:
                total = T.add(total, T.tsum(contribution))
            prev = (layers, _standardize(values, dists, layers.spec))
        return total

    def trace_log_q(self, trace: Trace, observation: Optional[Value] = None) -> T.Tensor:
        if observation is not None and trace.observation is None:
            trace.observation = observation
        return self.batch_log_q([trace])

    def minibatch_loss(self, traces: list[Trace]) -> T.Tensor:
        """Mean negative log q over the minibatch, computed per sub-minibatch
        (one batched unroll per trace type)."""
        if not traces:
            raise ValueError("minibatch must be nonempty")
        groups: dict[int, list[Trace]] = {}
        for t in traces:
            groups.setdefault(t.type_id, []).append(t)
        total = T.Tensor(0.0)
        used = 0
        for type_id in sorted(groups):
            sub = groups[type_id]
            try:
                total = T.add(total, self.batch_log_q(sub))
                used += len(sub)
            except UnknownAddress:
                if not self.frozen:
                    raise
                self.skipped_unknown += len(sub)
        if used == 0:
            raise UnknownAddress("every trace in the minibatch has unknown addresses")
        return T.mul(total, T.Tensor(-1.0 / used))

    def sub_minibatch_count(self, traces: list[Trace]) -> int:
        return len({t.type_id for t in traces})

    # ---- inference ----

    def guided_policy(self) -> Guided:
        return Guided(lambda observation: _GuidedSource(self, observation))

    # ---- persistence ----

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "obs_shift": self.obs_shift,
            "obs_scale": self.obs_scale,
            "train_step": self.train_step,
            "addresses": [
                {"id": self.dictionary.lookup_id(full), "full": full,
                 "tag": layers.spec.tag, "n_classes": layers.spec.n_classes,
                 "head": layers.spec.head}
                for full, layers in sorted(self.layers.items(),
                                           key=lambda kv: self.dictionary.lookup_id(kv[0]))
            ],
        }

    def save(self, path):
        save_archive(path, {n: p.data for n, p in self.params.items()},
                     meta=self.manifest())

    @staticmethod
    def load(path) -> "ProposalNetwork":
        arrays, meta = load_archive(path)
        if meta is None:
            raise ValueError("checkpoint has no manifest")
        cfg_dict = dict(meta["config"])
        cfg_dict["obs_grid"] = tuple(cfg_dict["obs_grid"])
        net = ProposalNetwork(NetworkConfig(**cfg_dict))
        for item in meta["addresses"]:
            spec = AddressSpec(item["full"], item["tag"], item["n_classes"], item["head"])
            layer_id = net.dictionary.id_for(item["full"])
            if layer_id != item["id"]:
                raise ValueError("manifest address order corrupt")
            net.layers[item["full"]] = _AddressLayers(net, spec, layer_id)
        net.params.load_state(arrays)
        net.set_obs_normalization(meta["obs_shift"], meta["obs_scale"])
        net.train_step = int(meta["train_step"])
        net.freeze()
        return net


class _GuidedSource:
    """Per-run incremental unroll mirroring the training-time step order."""

    def __init__(self, net: ProposalNetwork, observation: Optional[Value]):
        self.net = net
        self.obs_embed = net.embed_observations([observation])
        self.state = net.lstm.initial_state(1)
        self.prev: Optional[tuple[_AddressLayers, np.ndarray]] = None
        self.last_address: Optional[Address] = None
        self.last_proposal = None
        self._pending: Optional[tuple[_AddressLayers, Distribution]] = None

    def __call__(self, address: Address, dist: Distribution, control: bool,
                 replace: bool):
        if address == self.last_address:
            return self.last_proposal  # redraw inside one rejection loop
        layers = self.net.layers.get(address.full)
        self.last_address = address
        if layers is None:
            # unknown at inference: fall back to the prior, keep state as-is
            self.last_proposal = None
            self._pending = None
            return None
        x = self.net._step_input(1, layers, self.obs_embed, self.prev)
        h, self.state = self.net.lstm.step(x, self.state)
        proposal = None
        if control and not replace:
            proposal = self.net._proposal_distribution(layers, h.data[0], dist)
        self.last_proposal = proposal
        self._pending = (layers, dist)
        return proposal

    def feed_value(self, address: Address, value: Value):
        if self._pending is None or address != self.last_address:
            return
        layers, dist = self._pending
        vals = np.array([value.as_float()])
        self.prev = (layers, _standardize(vals, [dist], layers.spec))


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_np(x):
    return np.where(x > 30.0, x, np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0))
