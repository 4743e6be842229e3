"""Controller-side supervision of simulator runs.

A gateway owns one simulator connection (in-process, socket, or spawned
subprocess), services its sample/observe requests according to a sampling
policy, and assembles the execution trace. All randomness is drawn on the
controller side from counter-based generators, so traces are reproducible
independent of scheduling.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .addressing import Address
from .distributions import Distribution
from .rng import RunRng
from .trace import EntryKind, Trace, TraceEntry
from .values import Value
from .wire import (
    HandshakeResult, MessageKind, ObserveAck, ObserveNotify, ProtocolError,
    Run, SampleReply, SampleRequest, SessionState, WireMessage, session_step,
)


class RunTimeout(RuntimeError):
    pass


class RunAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# sampling policies


@dataclass
class PolicyDraw:
    value: Value
    log_q: Optional[float] = None  # proposal log-density when not drawn from the prior
    reused: bool = False  # consumed from a stored trace (replay)


class SamplingPolicy:
    """Decides the value of every draw the simulator requests."""

    def start_run(self, observation: Optional[Value]) -> "RunPolicy":
        raise NotImplementedError


class RunPolicy:
    def draw(self, address: Address, dist: Distribution, control: bool,
             replace: bool, gen: np.random.Generator) -> PolicyDraw:
        raise NotImplementedError


class Prior(SamplingPolicy):
    def start_run(self, observation):
        return _PriorRun()


class _PriorRun(RunPolicy):
    def draw(self, address, dist, control, replace, gen):
        return PolicyDraw(dist.sample(gen))


class Replay(SamplingPolicy):
    """Replays stored values keyed by address; repeated visits to one key
    consume values in order. Missing keys fall back to prior draws and are
    recorded as fresh.

    `values` maps Address -> list of (value, injected) pairs where
    `injected=True` marks values that did not come from the stored trace
    (e.g. an MCMC proposal) and therefore count as fresh randomness.
    """

    def __init__(self, values: dict[Address, list[tuple[Value, bool]]]):
        self.values = values

    @staticmethod
    def of_trace(trace: Trace) -> "Replay":
        queues: dict[Address, list[tuple[Value, bool]]] = collections.defaultdict(list)
        for e in trace.entries:
            if e.kind in (EntryKind.LATENT, EntryKind.REPLACED):
                queues[e.address].append((e.value, False))
        return Replay(dict(queues))

    def start_run(self, observation):
        return _ReplayRun(self.values)


class _ReplayRun(RunPolicy):
    def __init__(self, values):
        self._queues = {k: collections.deque(v) for k, v in values.items()}
        # number of stored (non-injected) values consumed per key
        self.consumed_stored: dict[Address, int] = collections.defaultdict(int)

    def draw(self, address, dist, control, replace, gen):
        q = self._queues.get(address)
        if q:
            value, injected = q.popleft()
            if not injected:
                self.consumed_stored[address] += 1
            return PolicyDraw(value, log_q=None, reused=not injected)
        return PolicyDraw(dist.sample(gen))


# factory(observation) -> callable(address, dist, control, replace) -> Distribution | None
ProposalFactory = Callable[[Optional[Value]], Callable[..., Optional[object]]]


class Guided(SamplingPolicy):
    """Draws controlled, non-replace sites from a proposal source and
    accumulates the importance-weight correction log p - log q per draw.

    The proposal source sees every draw (so it can track execution state in
    step order); it returns None for sites it does not guide, which then
    fall back to the prior with zero weight contribution.
    """

    def __init__(self, proposal_factory: ProposalFactory):
        self.proposal_factory = proposal_factory

    def start_run(self, observation):
        return _GuidedRun(self.proposal_factory(observation))


class _GuidedRun(RunPolicy):
    def __init__(self, source):
        self._source = source

    def draw(self, address, dist, control, replace, gen):
        try:
            proposal = self._source(address, dist, control, replace)
        except KeyError:
            proposal = None
        if proposal is None:
            value = dist.sample(gen)
            self._notify(address, value)
            return PolicyDraw(value)
        value = proposal.sample(gen)
        self._notify(address, value)
        return PolicyDraw(value, log_q=proposal.log_prob(value))

    def _notify(self, address, value):
        feed = getattr(self._source, "feed_value", None)
        if feed is not None:
            feed(address, value)


# ---------------------------------------------------------------------------
# per-run trace building


class _RunState:
    """Instance allocation and entry recording for one simulator run."""

    def __init__(self, observation: Optional[Value], policy_run: RunPolicy, run_rng: RunRng):
        self.trace = Trace(observation=observation)
        self.policy = policy_run
        self.rng = run_rng
        self._counters: dict[str, int] = collections.defaultdict(int)
        # open rejection loop: (full, instance, entry index) of the pending
        # replace draw; closed by any draw at a different address, so the
        # redraws of one loop must be consecutive requests at one address
        self._pending_replace: Optional[tuple[str, int, int]] = None

    def on_sample(self, m: SampleRequest) -> Value:
        full = m.address
        pending = self._pending_replace
        if pending is not None and pending[0] != full:
            pending = self._pending_replace = None
        if m.replace and pending is not None:
            _, instance, prev_idx = pending
            self.trace.entries[prev_idx].kind = EntryKind.REPLACED
        else:
            self._counters[full] += 1
            instance = self._counters[full]
        address = Address(full, instance)
        gen = self.rng.next_generator()
        drawn = self.policy.draw(address, m.distribution, m.control, m.replace, gen)
        log_prob = m.distribution.log_prob(drawn.value)
        entry = TraceEntry(address, m.distribution, drawn.value, log_prob,
                           EntryKind.LATENT, control=m.control, replace=m.replace,
                           name=m.name)
        entry.reused = drawn.reused
        self.trace.entries.append(entry)
        if m.replace:
            self._pending_replace = (full, instance, len(self.trace.entries) - 1)
        else:
            self._pending_replace = None
        if drawn.log_q is not None:
            self.trace.log_weight_correction += log_prob - drawn.log_q
        return drawn.value

    def on_observe(self, m: ObserveNotify) -> Value:
        full = m.address
        self._counters[full] += 1
        address = Address(full, self._counters[full])
        if m.observed_value is not None:
            value = m.observed_value
        else:
            # offline generation: draw y ~ p(y|x) controller-side
            value = m.distribution.sample(self.rng.next_generator())
        log_prob = m.distribution.log_prob(value)
        entry = TraceEntry(address, m.distribution, value, log_prob,
                           EntryKind.OBSERVED)
        entry.reused = False
        self.trace.entries.append(entry)
        return value

    def finish(self, result: Value) -> Trace:
        t = self.trace
        t.result = result
        if t.observation is None:
            obs = [e.value for e in t.entries if e.kind == EntryKind.OBSERVED]
            if len(obs) == 1:
                t.observation = obs[0]
            elif obs:
                t.observation = Value.tensor([v.as_float() for v in obs])
        t.finalize()
        if isinstance(self.policy, _ReplayRun):
            t.replay_consumed = dict(self.policy.consumed_stored)
        return t


class ControllerSession:
    """Message-level controller for one simulator connection.

    Both the in-process and the socket transports feed messages through
    here, so the session ordering rules are enforced on every path.
    """

    def __init__(self, require_version: int = 1):
        self.state = SessionState.AWAITING_HANDSHAKE
        self.require_version = require_version
        self.peer_name = ""
        self._run: Optional[_RunState] = None
        self._finished: Optional[Trace] = None

    def _advance(self, m):
        self.state = session_step(self.state, m)

    def handle(self, m: WireMessage) -> Optional[WireMessage]:
        """Process one simulator message; returns the reply to send, if any."""
        self._advance(m)
        if m.kind == MessageKind.HANDSHAKE:
            if m.version != self.require_version:
                raise ProtocolError(f"unsupported protocol version {m.version}")
            self.peer_name = m.name
            reply = HandshakeResult(version=self.require_version, ok=True)
        elif m.kind == MessageKind.SAMPLE_REQUEST:
            reply = SampleReply(self._run.on_sample(m))
        elif m.kind == MessageKind.OBSERVE_NOTIFY:
            value = self._run.on_observe(m)
            reply = ObserveAck(returned_value=None if m.observed_value is not None else value)
        elif m.kind == MessageKind.RUN_RESULT:
            self._finished = self._run.finish(m.result)
            self._run = None
            return None
        else:
            raise ProtocolError(f"controller cannot handle {m.kind.name}")
        self._advance(reply)
        return reply

    def begin_run(self, observation: Optional[Value], policy: SamplingPolicy,
                  run_rng: RunRng) -> Run:
        if self._run is not None:
            raise ProtocolError("a run is already in flight on this session")
        self._run = _RunState(observation, policy.start_run(observation), run_rng)
        self._finished = None
        m = Run(observation=observation)
        self._advance(m)
        return m

    def abort_run(self):
        self._run = None
        self._finished = None
        self.state = SessionState.AWAITING_RUN

    def take_trace(self) -> Trace:
        t = self._finished
        if t is None:
            raise ProtocolError("no finished run")
        self._finished = None
        return t
