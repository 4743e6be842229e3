"""Adam / Adam-LARC optimizers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import ParamStore


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" or "adam-larc"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    larc_eta: float = 0.001  # trust coefficient, clipping mode


class Adam:
    """Adam with bias correction; the LARC variant clips each parameter
    tensor's learning rate to eta * ||w|| / ||grad w||."""

    def __init__(self, store: ParamStore, config: OptimizerConfig = OptimizerConfig()):
        self.store = store
        self.config = config
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, lr: float):
        cfg = self.config
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + cfg.eps)
            p.data = p.data - self._effective_lr(lr, p.data, g) * update

    def _effective_lr(self, lr: float, w: np.ndarray, g: np.ndarray) -> float:
        if self.config.kind != "adam-larc":
            return lr
        w_norm = float(np.linalg.norm(w))
        g_norm = float(np.linalg.norm(g))
        if w_norm == 0.0 or g_norm == 0.0:
            return lr
        return min(lr, self.config.larc_eta * w_norm / g_norm)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"__t__": np.array([float(self.t)])}
        for name in self._m:
            out[f"m.{name}"] = self._m[name].copy()
            out[f"v.{name}"] = self._v[name].copy()
        return out


def larc_effective_lr(lr: float, eta: float, w_norm: float, g_norm: float) -> float:
    """Clipping-mode trust ratio: min(lr, eta * ||w|| / ||g||)."""
    if w_norm == 0.0 or g_norm == 0.0:
        return lr
    return min(lr, eta * w_norm / g_norm)


@dataclass
class LrSchedule:
    """constant | multistep | poly.

    poly decays lr0 -> lr_final over total_steps as
    lr_final + (lr0 - lr_final) * (1 - t/T)^power.
    """

    kind: str = "constant"
    lr0: float = 1e-3
    lr_final: float = 1e-5
    total_steps: int = 1
    power: int = 2
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def lr_at(self, t: int) -> float:
        if self.kind == "constant":
            return self.lr0
        if self.kind == "multistep":
            drops = sum(1 for m in self.milestones if t >= m)
            return self.lr0 * self.gamma ** drops
        if self.kind == "poly":
            if t < 0 or t > self.total_steps:
                raise ValueError(f"step {t} outside [0, {self.total_steps}]")
            frac = 1.0 - t / self.total_steps
            return self.lr_final + (self.lr0 - self.lr_final) * frac ** self.power
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def sub_sqrt_scaled_lr(lr_single: float, workers: int, alpha: float = 0.5) -> float:
    """Scale a single-worker learning rate to `workers` ranks; alpha in
    (0, 0.5] keeps scaling at or below square-root growth."""
    if not 0.0 < alpha <= 0.5:
        raise ValueError("alpha must be in (0, 0.5]")
    return lr_single * workers ** alpha
