"""Built-in reference simulators.

All three speak the protocol through a ModelContext, so they run unchanged
in-process, behind a socket server, or spawned as a subprocess.

  conjugate   scalar Gaussian with analytic posterior
  discrete    two binary choices with an enumerable posterior
  cascade     decay channel -> particle energies (with a rejection loop)
              -> deterministic energy deposit on a voxel grid observed
              under per-voxel Gaussian noise
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import Distribution
from .simclient import ModelContext
from .values import Value, ValueTag


# ---------------------------------------------------------------------------
# conjugate Gaussian


@dataclass(frozen=True)
class ConjugateConfig:
    prior_mean: float = 0.0
    prior_std: float = 1.0
    likelihood_std: float = 1.0
    n_observations: int = 1

    def posterior(self, ys) -> tuple[float, float]:
        """Analytic posterior (mean, variance) given observations."""
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        prec = 1.0 / self.prior_std ** 2 + len(ys) / self.likelihood_std ** 2
        var = 1.0 / prec
        mean = var * (self.prior_mean / self.prior_std ** 2
                      + ys.sum() / self.likelihood_std ** 2)
        return mean, var

    def evidence_logpdf(self, y: float) -> float:
        """log p(y) for a single observation."""
        var = self.prior_std ** 2 + self.likelihood_std ** 2
        return float(-0.5 * np.log(2 * np.pi * var) - (y - self.prior_mean) ** 2 / (2 * var))


def conjugate_model(cfg: ConjugateConfig = ConjugateConfig()):
    def run(ctx: ModelContext) -> Value:
        x = ctx.sample(Distribution.normal(cfg.prior_mean, cfg.prior_std),
                       frames=["conjugate_gaussian.run", "latent_mean"],
                       name="mean").as_float()
        lik = Distribution.normal(x, cfg.likelihood_std)
        obs = ctx.observation
        for j in range(cfg.n_observations):
            if obs is None:
                value = None
            elif obs.tag == ValueTag.TENSOR:
                value = Value.f64(obs.numeric()[j])
            else:
                value = obs
            ctx.observe(lik, frames=["conjugate_gaussian.run", "measurement"], value=value)
        return Value.f64(x)
    return run


# ---------------------------------------------------------------------------
# 4-state discrete


@dataclass(frozen=True)
class DiscreteConfig:
    prior_a: tuple[float, float] = (0.5, 0.5)
    prior_b: tuple[float, float] = (0.5, 0.5)
    # likelihood_table[a][b] = outcome class probabilities
    likelihood_table: tuple = (
        ((0.9, 0.1), (0.6, 0.4)),
        ((0.3, 0.7), (0.1, 0.9)),
    )

    def enumerate_posterior(self, y: int) -> np.ndarray:
        """Exact posterior over the four (a, b) states by enumeration."""
        post = np.zeros(4)
        for a in range(2):
            for b in range(2):
                post[a * 2 + b] = (self.prior_a[a] * self.prior_b[b]
                                   * self.likelihood_table[a][b][y])
        return post / post.sum()


def discrete_model(cfg: DiscreteConfig = DiscreteConfig()):
    def run(ctx: ModelContext) -> Value:
        a = ctx.sample(Distribution.categorical(cfg.prior_a),
                       frames=["discrete_pair.run", "branch_a"]).as_int()
        b = ctx.sample(Distribution.categorical(cfg.prior_b),
                       frames=["discrete_pair.run", "branch_b"]).as_int()
        lik = Distribution.categorical(cfg.likelihood_table[a][b])
        ctx.observe(lik, frames=["discrete_pair.run", "detector"],
                    value=ctx.observation)
        return Value.i64(a * 2 + b)
    return run


# ---------------------------------------------------------------------------
# mini-cascade


BLOB_CENTERS = ((1, 1), (6, 1), (1, 6), (6, 6), (3, 3), (6, 3), (3, 6), (4, 1))


@dataclass(frozen=True)
class CascadeConfig:
    channel_probs: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    # equal bounds keep single-site channel moves reversible: replayed
    # energies stay inside the prior support of every channel
    energy_bounds: tuple[tuple[float, float], ...] = ((8.0, 28.0), (8.0, 28.0),
                                                      (8.0, 28.0), (8.0, 28.0))
    extra_rate: float = 0.8
    grid: tuple[int, int, int] = (8, 8, 4)
    noise_std: float = 1.0
    z_sigma: float = 0.8

    def __post_init__(self):
        if abs(sum(self.channel_probs) - 1.0) > 1e-9:
            raise ValueError("channel_probs must sum to 1")
        for lo, hi in self.energy_bounds:
            if not lo < hi:
                raise ValueError("energy bounds must be ordered")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")

    @property
    def max_particles(self) -> int:
        return len(BLOB_CENTERS)


def cascade_deposit(cfg: CascadeConfig, channel: int,
                    energies: list[float], spreads: list[float]) -> np.ndarray:
    """Deterministic energy deposition of the particle set onto the grid."""
    nx, ny, nz = cfg.grid
    xs = np.arange(nx)[:, None, None]
    ys = np.arange(ny)[None, :, None]
    zs = np.arange(nz)[None, None, :]
    grid = np.zeros(cfg.grid)
    cz = channel % nz
    for i, (energy, spread) in enumerate(zip(energies, spreads)):
        cx, cy = BLOB_CENTERS[i % len(BLOB_CENTERS)]
        # spread only mildly reshapes the blob; energy sets its amplitude.
        # Spreads come from rejection loops that no proposal can guide, so
        # their likelihood influence is kept small by construction.
        sigma_xy = 0.95 + 0.1 * spread
        r2 = (xs - cx) ** 2 + (ys - cy) ** 2
        grid = grid + energy * np.exp(-r2 / (2 * sigma_xy ** 2)
                                      - (zs - cz) ** 2 / (2 * cfg.z_sigma ** 2))
    return grid


def scatter_accept_prob(energy: float, lo: float, hi: float) -> float:
    e_norm = (energy - lo) / (hi - lo)
    return 0.3 + 0.65 * min(max(e_norm, 0.0), 1.0)


def cascade_model(cfg: CascadeConfig = CascadeConfig()):
    def run(ctx: ModelContext) -> Value:
        channel = ctx.sample(Distribution.categorical(cfg.channel_probs),
                             frames=["mini_cascade.run", "decay_channel"],
                             name="channel").as_int()
        extra = ctx.sample(Distribution.poisson(cfg.extra_rate),
                           frames=["mini_cascade.run", "extra_particles"],
                           name="extra").as_int()
        n = min(channel + 1 + extra, cfg.max_particles)
        lo, hi = cfg.energy_bounds[channel]
        energies, spreads = [], []
        for _ in range(n):
            energy = ctx.sample(Distribution.uniform(lo, hi),
                                frames=["mini_cascade.run", "particle_energy"],
                                name="energy").as_float()
            p_acc = scatter_accept_prob(energy, lo, hi)
            # controlled so MCMC may re-run the whole loop; guided proposals
            # skip replace sites and draw them from the prior
            while True:
                u = ctx.sample(Distribution.uniform(0.0, 1.0),
                               frames=["mini_cascade.run", "scatter_accept"],
                               control=True, replace=True).as_float()
                if u < p_acc:
                    break
            energies.append(energy)
            spreads.append(u)
        deposit = cascade_deposit(cfg, channel, energies, spreads)
        flat = deposit.reshape(-1)
        lik = Distribution.mvn_diag(flat, np.full(flat.size, cfg.noise_std))
        ctx.observe(lik, frames=["mini_cascade.run", "calorimeter"],
                    value=ctx.observation)
        return Value.tensor(deposit)
    return run


_REGISTRY = {
    "conjugate": conjugate_model,
    "discrete": discrete_model,
    "cascade": cascade_model,
}


def get_model(name: str, **kwargs):
    """Instantiate a built-in model by name with its default config."""
    base = name.split("#")[0]
    if base not in _REGISTRY:
        raise KeyError(f"unknown model {name!r}; have {sorted(_REGISTRY)}")
    return _REGISTRY[base](**kwargs)


MODEL_NAMES = tuple(sorted(_REGISTRY))
