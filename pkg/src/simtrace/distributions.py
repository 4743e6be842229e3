"""Parameterized probability distributions shared by controller and simulator.

Each distribution is a tagged union member with a flat float64 parameter
vector (the wire representation), a log-density, and a sampler driven by an
externally supplied numpy Generator so that all randomness stays under
controller control.

Instances are immutable: the parameter array is read-only. The raw
constructor does not validate (malformed parameters must surface as codec
errors); the named constructors do.
"""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

from .values import Value, ValueTag

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DistTag(enum.IntEnum):
    UNIFORM = 1
    NORMAL = 2
    TRUNCATED_NORMAL = 3
    CATEGORICAL = 4
    POISSON = 5
    MVN_DIAG = 6

    @property
    def display_name(self) -> str:
        return _TAG_NAMES[self]


_TAG_NAMES = {
    DistTag.UNIFORM: "Uniform",
    DistTag.NORMAL: "Normal",
    DistTag.TRUNCATED_NORMAL: "TruncatedNormal",
    DistTag.CATEGORICAL: "Categorical",
    DistTag.POISSON: "Poisson",
    DistTag.MVN_DIAG: "MultivariateNormalDiag",
}


class InvalidParameters(ValueError):
    """Raised when distribution parameters violate their invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


def _tiny_clip(u: float) -> float:
    # keep inverse-CDF transforms away from exactly 0/1
    return min(max(u, 5e-324), 1.0 - 1e-16)


class Distribution:
    __slots__ = ("tag", "params")

    def __init__(self, tag: DistTag, params):
        arr = np.asarray(params, dtype=np.float64).reshape(-1)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "tag", DistTag(tag))
        object.__setattr__(self, "params", arr)

    def __setattr__(self, *_):
        raise AttributeError("Distribution is immutable")

    def __eq__(self, other):
        if not isinstance(other, Distribution):
            return NotImplemented
        return self.tag == other.tag and np.array_equal(self.params, other.params)

    def __hash__(self):
        return hash((int(self.tag), self.params.tobytes()))

    def __repr__(self):
        inner = ", ".join(f"{x:g}" for x in self.params[:6])
        if len(self.params) > 6:
            inner += f", ... ({len(self.params)} params)"
        return f"{self.tag.display_name}({inner})"

    # ---- constructors ----

    @staticmethod
    def uniform(low: float, high: float) -> "Distribution":
        return _checked(Distribution(DistTag.UNIFORM, (low, high)))

    @staticmethod
    def normal(mean: float, std: float) -> "Distribution":
        return _checked(Distribution(DistTag.NORMAL, (mean, std)))

    @staticmethod
    def truncated_normal(mean: float, std: float, low: float, high: float) -> "Distribution":
        return _checked(Distribution(DistTag.TRUNCATED_NORMAL, (mean, std, low, high)))

    @staticmethod
    def categorical(probs) -> "Distribution":
        return _checked(Distribution(DistTag.CATEGORICAL, probs))

    @staticmethod
    def poisson(rate: float) -> "Distribution":
        return _checked(Distribution(DistTag.POISSON, (rate,)))

    @staticmethod
    def mvn_diag(means, stds) -> "Distribution":
        params = np.concatenate([np.asarray(means, dtype=np.float64).reshape(-1),
                                 np.asarray(stds, dtype=np.float64).reshape(-1)])
        return _checked(Distribution(DistTag.MVN_DIAG, params))

    # ---- invariants ----

    def validate(self):
        t, p = self.tag, self.params
        if t == DistTag.UNIFORM:
            if len(p) != 2:
                raise InvalidParameters("parameters", "Uniform takes (low, high)")
            if not p[0] < p[1]:
                raise InvalidParameters("low/high", f"need low < high, got {p.tolist()}")
        elif t == DistTag.NORMAL:
            if len(p) != 2:
                raise InvalidParameters("parameters", "Normal takes (mean, std)")
            if not p[1] > 0:
                raise InvalidParameters("std", f"need std > 0, got {p[1]}")
        elif t == DistTag.TRUNCATED_NORMAL:
            if len(p) != 4:
                raise InvalidParameters("parameters", "TruncatedNormal takes (mean, std, low, high)")
            if not p[1] > 0:
                raise InvalidParameters("std", f"need std > 0, got {p[1]}")
            if not p[2] < p[3]:
                raise InvalidParameters("low/high", f"need low < high, got {p[2:].tolist()}")
        elif t == DistTag.CATEGORICAL:
            if len(p) < 1:
                raise InvalidParameters("probabilities", "need at least one class")
            if np.any(p < 0):
                raise InvalidParameters("probabilities", "negative probability")
            if abs(float(p.sum()) - 1.0) > 1e-9:
                raise InvalidParameters("probabilities", f"sum {p.sum()} not within 1e-9 of 1")
        elif t == DistTag.POISSON:
            if len(p) != 1:
                raise InvalidParameters("parameters", "Poisson takes (rate,)")
            if not p[0] > 0:
                raise InvalidParameters("rate", f"need rate > 0, got {p[0]}")
        elif t == DistTag.MVN_DIAG:
            if len(p) < 2 or len(p) % 2 != 0:
                raise InvalidParameters("parameters", "MultivariateNormalDiag takes (means..., stds...)")
            k = len(p) // 2
            if np.any(p[k:] <= 0):
                raise InvalidParameters("stds", "all stds must be > 0")
        else:  # pragma: no cover
            raise InvalidParameters("tag", f"unknown tag {t}")
        return self

    # ---- views ----

    @property
    def dim(self) -> int:
        if self.tag == DistTag.MVN_DIAG:
            return len(self.params) // 2
        return 1

    @property
    def n_classes(self) -> int:
        if self.tag != DistTag.CATEGORICAL:
            raise TypeError("n_classes only defined for Categorical")
        return len(self.params)

    def support(self) -> tuple[float, float]:
        """Interval support for scalar continuous distributions."""
        t, p = self.tag, self.params
        if t == DistTag.UNIFORM:
            return float(p[0]), float(p[1])
        if t == DistTag.NORMAL:
            return -math.inf, math.inf
        if t == DistTag.TRUNCATED_NORMAL:
            return float(p[2]), float(p[3])
        raise TypeError(f"{t.display_name} has no interval support")

    def mean(self) -> float:
        t, p = self.tag, self.params
        if t == DistTag.UNIFORM:
            return float(0.5 * (p[0] + p[1]))
        if t in (DistTag.NORMAL, DistTag.POISSON):
            return float(p[0])
        raise TypeError(f"mean() not implemented for {t.display_name}")

    # ---- densities ----

    def log_prob(self, value: Value) -> float:
        t, p = self.tag, self.params
        if t == DistTag.UNIFORM:
            x = value.as_float()
            low, high = p[0], p[1]
            if low <= x <= high:
                return -math.log(high - low)
            return -math.inf
        if t == DistTag.NORMAL:
            x = value.as_float()
            mean, std = p[0], p[1]
            z = (x - mean) / std
            return -0.5 * z * z - math.log(std) - LOG_SQRT_2PI
        if t == DistTag.TRUNCATED_NORMAL:
            x = value.as_float()
            mean, std, low, high = p[0], p[1], p[2], p[3]
            if x < low or x > high:
                return -math.inf
            z = (x - mean) / std
            base = -0.5 * z * z - math.log(std) - LOG_SQRT_2PI
            return base - _log_z_interval((low - mean) / std, (high - mean) / std)
        if t == DistTag.CATEGORICAL:
            k = value.as_int()
            if k < 0 or k >= len(p):
                return -math.inf
            prob = p[k]
            return math.log(prob) if prob > 0 else -math.inf
        if t == DistTag.POISSON:
            k = value.as_int()
            if k < 0:
                return -math.inf
            rate = p[0]
            return k * math.log(rate) - rate - float(gammaln(k + 1))
        if t == DistTag.MVN_DIAG:
            x = value.numeric()
            k = len(p) // 2
            means = p[:k]
            stds = p[k:]
            if x.size != k:
                raise ValueError(f"value has {x.size} components, expected {k}")
            z = (x - means) / stds
            return float(-0.5 * np.dot(z, z) - np.log(stds).sum() - k * LOG_SQRT_2PI)
        raise TypeError(f"unknown tag {t}")  # pragma: no cover

    # ---- sampling ----

    def sample(self, gen: np.random.Generator) -> Value:
        t, p = self.tag, self.params
        if t == DistTag.UNIFORM:
            low, high = p[0], p[1]
            return Value.f64(low + (high - low) * gen.random())
        if t == DistTag.NORMAL:
            mean, std = p[0], p[1]
            return Value.f64(mean + std * float(ndtri(_tiny_clip(gen.random()))))
        if t == DistTag.TRUNCATED_NORMAL:
            mean, std, low, high = p[0], p[1], p[2], p[3]
            a = ndtr((low - mean) / std)
            b = ndtr((high - mean) / std)
            u = a + (b - a) * gen.random()
            x = mean + std * float(ndtri(_tiny_clip(u)))
            return Value.f64(min(max(x, low), high))
        if t == DistTag.CATEGORICAL:
            u = gen.random()
            acc = 0.0
            for i, prob in enumerate(p):
                acc += prob
                if u < acc:
                    return Value.i64(i)
            return Value.i64(len(p) - 1)
        if t == DistTag.POISSON:
            return Value.i64(int(gen.poisson(p[0])))
        if t == DistTag.MVN_DIAG:
            k = len(p) // 2
            u = np.clip(gen.random(k), 5e-324, 1.0 - 1e-16)
            return Value.tensor(p[:k] + p[k:] * ndtri(u))
        raise TypeError(f"unknown tag {t}")  # pragma: no cover


def _checked(d: Distribution) -> Distribution:
    return d.validate()


def _log_z_interval(alpha: float, beta: float) -> float:
    """log(Phi(beta) - Phi(alpha)) computed stably for tail intervals."""
    if alpha == -math.inf and beta == math.inf:
        return 0.0
    # reflect so that we work in the lower tail where log_ndtr is accurate
    if alpha + beta > 0:
        alpha, beta = -beta, -alpha
    la = log_ndtr(alpha) if alpha > -math.inf else -math.inf
    lb = log_ndtr(beta)
    if la == -math.inf:
        return float(lb)
    return float(lb + math.log1p(-math.exp(la - lb)))


class DefensiveMixture:
    """(1 - eps) * proposal + eps * prior.

    Mixing a slice of the prior into a learned proposal bounds the
    importance ratio p/q by 1/eps, so a confidently wrong proposal cannot
    collapse the effective sample size.
    """

    __slots__ = ("proposal", "prior", "eps")

    def __init__(self, proposal, prior, eps: float):
        if not 0.0 < eps < 1.0:
            raise InvalidParameters("eps", f"need 0 < eps < 1, got {eps}")
        self.proposal = proposal
        self.prior = prior
        self.eps = eps

    def log_prob(self, value: Value) -> float:
        lp = self.proposal.log_prob(value)
        lq = self.prior.log_prob(value)
        a = math.log1p(-self.eps) + lp
        b = math.log(self.eps) + lq
        m = max(a, b)
        if m == -math.inf:
            return -math.inf
        return m + math.log(math.exp(a - m) + math.exp(b - m))

    def sample(self, gen: np.random.Generator) -> Value:
        if gen.random() < self.eps:
            return self.prior.sample(gen)
        return self.proposal.sample(gen)


class TruncatedNormalMixture:
    """Mixture of truncated normals on a shared truncation interval.

    This is the proposal family emitted by continuous proposal heads; with
    infinite bounds the components degenerate to plain normals.
    """

    __slots__ = ("weights", "means", "stds", "low", "high", "_components")

    def __init__(self, weights, means, stds, low: float, high: float):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.means = np.asarray(means, dtype=np.float64).reshape(-1)
        self.stds = np.asarray(stds, dtype=np.float64).reshape(-1)
        self.low = float(low)
        self.high = float(high)
        if not (self.weights.size == self.means.size == self.stds.size):
            raise InvalidParameters("mixture", "component arrays must have equal length")
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise InvalidParameters("weights", f"sum {self.weights.sum()} != 1")
        if np.any(self.stds <= 0):
            raise InvalidParameters("stds", "must be > 0")
        unbounded = self.low == -math.inf and self.high == math.inf
        comps = []
        for m, s in zip(self.means, self.stds):
            if unbounded:
                comps.append(Distribution.normal(m, s))
            else:
                comps.append(Distribution.truncated_normal(m, s, self.low, self.high))
        self._components = tuple(comps)

    def log_prob(self, value: Value) -> float:
        lps = np.array([c.log_prob(value) for c in self._components])
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        tot = lps + lw
        m = np.max(tot)
        if m == -math.inf:
            return -math.inf
        return float(m + math.log(np.exp(tot - m).sum()))

    def sample(self, gen: np.random.Generator) -> Value:
        u = gen.random()
        acc = 0.0
        idx = self.weights.size - 1
        for i, w in enumerate(self.weights):
            acc += w
            if u < acc:
                idx = i
                break
        return self._components[idx].sample(gen)
