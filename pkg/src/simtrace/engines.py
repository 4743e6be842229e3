"""Posterior inference over execution traces.

Importance sampling (prior or guided proposals), single-site trace-space
Metropolis-Hastings with prior-resample proposals, and evidence estimation.
The MH acceptance ratio follows the lightweight trace formulation; the full
derivation including structure changes and rejection-sampling loops is in
`docs/rmh.md`.
"""

from __future__ import annotations

import collections
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .addressing import Address
from .endpoints import Endpoint
from .gateway import Guided, Prior, Replay, RunAborted, RunTimeout, SamplingPolicy
from .rng import STREAM_ENGINE, STREAM_MODEL, CounterRng, RunRng
from .trace import EntryKind, Trace, TraceEntry
from .values import Value


class DegenerateWeights(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# importance sampling


@dataclass
class WeightedTraceSet:
    traces: list[Trace]
    log_weights: np.ndarray

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if len(self.traces) != self.log_weights.size:
            raise ValueError("traces and log_weights must have equal length")

    def __len__(self):
        return len(self.traces)

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        if np.all(np.isneginf(lw)):
            raise DegenerateWeights("all log-weights are -inf")
        m = lw.max()
        w = np.exp(lw - m)
        return w / w.sum()

    def effective_sample_size(self) -> float:
        w = self.normalized_weights()
        return float(1.0 / np.sum(w * w))

    def marginal(self, full_address: str, instance: int = 1):
        """(values, normalized weights) of one latent across traces that
        contain it; weights renormalized over that subset."""
        addr = Address(full_address, instance)
        vals, lws = [], []
        for t, lw in zip(self.traces, self.log_weights):
            for e in t.entries:
                if e.kind == EntryKind.LATENT and e.address == addr:
                    vals.append(e.value.as_float())
                    lws.append(lw)
                    break
        if not vals:
            return np.array([]), np.array([])
        lws = np.asarray(lws)
        if np.all(np.isneginf(lws)):
            raise DegenerateWeights(f"no finite weight covers address {addr}")
        w = np.exp(lws - lws.max())
        return np.asarray(vals), w / w.sum()

    def posterior_mean(self, full_address: str, instance: int = 1) -> float:
        vals, w = self.marginal(full_address, instance)
        return float(np.dot(vals, w))

    def posterior_variance(self, full_address: str, instance: int = 1) -> float:
        vals, w = self.marginal(full_address, instance)
        mu = float(np.dot(vals, w))
        return float(np.dot(w, (vals - mu) ** 2))


def importance_sample(endpoint: Endpoint, observation: Value, n: int, *,
                      proposal=None, seed: int = 0, run_offset: int = 0) -> WeightedTraceSet:
    """n guided or prior-proposal executions with importance weights.

    Without a proposal the weight of each trace is its log-likelihood; with
    one it additionally carries the accumulated log p - log q correction.
    `proposal` may be a SamplingPolicy or anything with a guided_policy()
    method (e.g. a trained proposal network).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if proposal is None:
        policy: SamplingPolicy = Prior()
    elif isinstance(proposal, SamplingPolicy):
        policy = proposal
    else:
        policy = proposal.guided_policy()
    root = CounterRng(seed)
    traces, log_weights = [], []
    for i in range(n):
        rng = RunRng(root, run_offset + i, STREAM_MODEL)
        t = endpoint.execute(observation, policy, rng)
        traces.append(t)
        log_weights.append(t.log_weight)
    ws = WeightedTraceSet(traces, np.asarray(log_weights))
    lw = ws.log_weights
    if np.all(np.isneginf(lw)):
        raise DegenerateWeights("all importance weights are zero")
    if n > 1 and ws.effective_sample_size() < 1.0 + 1e-9:
        raise DegenerateWeights("effective sample size collapsed to a single trace")
    return ws


def estimate_log_evidence(ws: WeightedTraceSet) -> float:
    """log mean exp of the log-weights: the evidence estimate log p(y)."""
    n = len(ws)
    if n < 1:
        raise ValueError("need at least one trace")
    return float(logsumexp(ws.log_weights) - math.log(n))


# ---------------------------------------------------------------------------
# random-walk lightweight Metropolis-Hastings


@dataclass
class SiteStats:
    proposed: int = 0
    accepted: int = 0


@dataclass
class MarkovChain:
    traces: list[Trace] = field(default_factory=list)
    accepted: int = 0
    site_stats: dict[str, SiteStats] = field(default_factory=dict)
    burn_in: int = 0
    skipped: int = 0

    def __len__(self):
        return len(self.traces)

    @property
    def acceptance_rate(self) -> float:
        moves = len(self.traces) - 1
        return self.accepted / moves if moves > 0 else 0.0

    def values(self, full_address: str, instance: int = 1,
               burn_in: Optional[int] = None) -> np.ndarray:
        """Chain of one latent's value; iterations without the address are
        skipped. Burn-in defaults to the chain's configured burn-in."""
        skip = self.burn_in if burn_in is None else burn_in
        addr = Address(full_address, instance)
        out = []
        for t in self.traces[skip:]:
            for e in t.entries:
                if e.kind == EntryKind.LATENT and e.address == addr:
                    out.append(e.value.as_float())
                    break
        return np.asarray(out)

    def kept(self, burn_in: Optional[int] = None) -> list[Trace]:
        skip = self.burn_in if burn_in is None else burn_in
        return self.traces[skip:]


def _sample_score(t: Trace) -> float:
    """Joint log-density of every random draw, replaced entries included."""
    return sum(e.log_prob for e in t.entries
               if e.kind in (EntryKind.LATENT, EntryKind.REPLACED))


def _sample_entries_by_key(t: Trace) -> dict[Address, list[TraceEntry]]:
    d: dict[Address, list[TraceEntry]] = collections.defaultdict(list)
    for e in t.entries:
        if e.kind in (EntryKind.LATENT, EntryKind.REPLACED):
            d[e.address].append(e)
    return d


def _replay_queues(t: Trace) -> dict[Address, list[tuple[Value, bool]]]:
    q: dict[Address, list[tuple[Value, bool]]] = collections.defaultdict(list)
    for e in t.entries:
        if e.kind in (EntryKind.LATENT, EntryKind.REPLACED):
            q[e.address].append((e.value, False))
    return q


def rmh_acceptance(old: Trace, new: Trace, n_sel_old: int, n_sel_new: int) -> float:
    """log of the MH acceptance ratio for a single-site prior-resample move."""
    consumed = getattr(new, "replay_consumed", {})
    old_by_key = _sample_entries_by_key(old)
    stale = 0.0
    for key, entries in old_by_key.items():
        used = consumed.get(key, 0)
        for e in entries[used:]:
            stale += e.log_prob
    fresh = sum(e.log_prob for e in new.entries
                if e.kind in (EntryKind.LATENT, EntryKind.REPLACED) and not e.reused)
    return ((_sample_score(new) + new.log_likelihood)
            - (_sample_score(old) + old.log_likelihood)
            + math.log(n_sel_old) - math.log(n_sel_new)
            + stale - fresh)


def rmh_run(endpoint: Endpoint, observation: Value, n_iters: int, seed: int, *,
            init: Optional[Trace] = None, burn_in: Optional[int] = None,
            propose_value: Optional[Callable] = None,
            store_results: bool = False) -> MarkovChain:
    """Single-site lightweight Metropolis-Hastings over execution traces.

    Each iteration picks one controlled latent uniformly, redraws it from
    its prior (or `propose_value(entry, gen)` when given), re-executes the
    simulator with all other draws replayed, and accepts by the trace-space
    MH ratio. A failed simulator run is retried once, then the iteration is
    skipped.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    engine_rng = CounterRng(seed)
    model_rng = CounterRng(seed)

    if init is None:
        current = endpoint.execute(observation, Prior(),
                                   RunRng(model_rng, 0, STREAM_MODEL))
    else:
        current = init
    if not current.control_latents():
        raise ValueError("initial trace has no controlled latent sites")
    if not store_results:
        current.result = None

    chain = MarkovChain(burn_in=n_iters // 10 if burn_in is None else burn_in)
    chain.traces.append(current)

    for i in range(1, n_iters + 1):
        gen = engine_rng.generator(i, 0, STREAM_ENGINE)
        sites = current.control_latents()
        k = int(gen.integers(len(sites)))
        entry = sites[k]
        stats = chain.site_stats.setdefault(entry.address.full, SiteStats())
        stats.proposed += 1

        queues = _replay_queues(current)
        if entry.replace:
            queues[entry.address] = []  # rerun the whole rejection loop fresh
        else:
            if propose_value is None:
                proposed = entry.distribution.sample(gen)
            else:
                proposed = propose_value(entry, gen)
            queues[entry.address] = [(proposed, True)]

        candidate = None
        for attempt in range(2):
            try:
                candidate = endpoint.execute(
                    observation, Replay(queues),
                    RunRng(model_rng, i, STREAM_MODEL))
                break
            except (RunAborted, RunTimeout) as e:
                if attempt == 1:
                    warnings.warn(f"iteration {i} skipped after retry: {e}")
        if candidate is None:
            chain.skipped += 1
            chain.traces.append(current)
            continue
        if not store_results:
            candidate.result = None

        n_sel_new = len(candidate.control_latents())
        if n_sel_new == 0:
            chain.traces.append(current)
            continue
        log_alpha = rmh_acceptance(current, candidate, len(sites), n_sel_new)
        if math.log(gen.random()) < log_alpha:
            current = candidate
            chain.accepted += 1
            stats.accepted += 1
        chain.traces.append(current)
    return chain
