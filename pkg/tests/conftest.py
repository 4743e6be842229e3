import os

import pytest

from simtrace.endpoints import InProcessEndpoint, sample_prior
from simtrace.models import (CascadeConfig, ConjugateConfig, DiscreteConfig,
                             cascade_model, conjugate_model, discrete_model)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session")
def vectors():
    out = {}
    with open(os.path.join(ROOT, "protocol_vectors.txt"), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, _, hexpart = line.partition(" ")
            out[name] = bytes.fromhex(hexpart)
    return out


@pytest.fixture()
def conjugate_endpoint():
    return InProcessEndpoint(conjugate_model(), "conjugate")


@pytest.fixture()
def discrete_endpoint():
    return InProcessEndpoint(discrete_model(), "discrete")


@pytest.fixture()
def cascade_endpoint():
    return InProcessEndpoint(cascade_model(), "cascade")


@pytest.fixture(scope="session")
def cascade_corpus_small():
    ep = InProcessEndpoint(cascade_model(), "cascade")
    return sample_prior(ep, 400, seed=10_000)


@pytest.fixture(scope="session")
def conjugate_transcript():
    """A real recorded message sequence from the conjugate toy model."""
    from simtrace.gateway import Prior
    from simtrace.rng import CounterRng, RunRng
    from simtrace.simclient import ModelContext
    from simtrace.gateway import ControllerSession
    from simtrace.wire import Handshake, RunResult

    session = ControllerSession()
    transcript = []

    def handle(msg):
        transcript.append(msg)
        reply = session.handle(msg)
        if reply is not None:
            transcript.append(reply)
        return reply

    reply = session.handle(Handshake(name="conjugate"))
    transcript.extend([Handshake(name="conjugate"), reply])
    for run in range(2):
        run_msg = session.begin_run(None, Prior(), RunRng(CounterRng(5), run))
        transcript.append(run_msg)
        ctx = ModelContext(handle, None)
        result = conjugate_model()(ctx)
        handle(RunResult(result))
        session.take_trace()
    return transcript
