"""simtrace: treat a stochastic simulator as a probabilistic program.

The controller records and steers a simulator's random draws over a wire
protocol and performs posterior inference on the resulting execution traces
by importance sampling, trace-space Metropolis-Hastings, and amortized
importance sampling with a trained proposal network.
"""

from .addressing import Address, AddressCache, AddressDictionary, resolve_address
from .distributions import Distribution, DistTag, InvalidParameters
from .endpoints import Endpoint, InProcessEndpoint, connect_endpoint, execute, sample_prior
from .gateway import Guided, Prior, Replay, RunAborted, RunTimeout, SamplingPolicy
from .rng import CounterRng, RunRng
from .trace import EntryKind, Trace, TraceEntry, log_joint, trace_type
from .values import TensorValue, Value, ValueTag

__version__ = "0.1.0"

__all__ = [
    "Address", "AddressCache", "AddressDictionary", "resolve_address",
    "Distribution", "DistTag", "InvalidParameters",
    "Endpoint", "InProcessEndpoint", "connect_endpoint", "execute", "sample_prior",
    "Guided", "Prior", "Replay", "RunAborted", "RunTimeout", "SamplingPolicy",
    "CounterRng", "RunRng",
    "EntryKind", "Trace", "TraceEntry", "log_joint", "trace_type",
    "TensorValue", "Value", "ValueTag",
    "__version__",
]
