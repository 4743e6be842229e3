"""Distributed synchronous training of the proposal network.

Every iteration each worker draws its own minibatch (from the offline
dataset sampler or fresh simulator runs), computes the local mean loss,
averages gradients across the group, and applies the same scheduled
optimizer step, so replicas stay identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .collective import WorkerGroup, broadcast_parameters, exchange_gradients, verify_layout
from .endpoints import Endpoint, sample_prior
from .optim import Adam, LrSchedule, OptimizerConfig
from .proposal import ProposalNetwork, UnknownAddress
from .store import TraceDataset, plan_minibatches
from .trace import EntryKind, Trace


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    lr: float
    traces_per_sec: float
    sub_minibatches: int
    skipped_traces: int
    val_loss: Optional[float] = None


def pregenerate_layers(dataset, config) -> ProposalNetwork:
    """Build a network whose registry covers every address in the dataset,
    with observation normalization fitted on the same pass."""
    net = ProposalNetwork(config)
    obs_sum = 0.0
    obs_sq = 0.0
    obs_n = 0
    for t in dataset:
        for e in t.entries:
            if e.kind == EntryKind.LATENT:
                net.register_address(e.address.full, e.distribution)
        if t.observation is not None:
            arr = t.observation.numeric()
            obs_sum += float(arr.sum())
            obs_sq += float(np.dot(arr, arr))
            obs_n += arr.size
    if obs_n > 0:
        mean = obs_sum / obs_n
        var = max(obs_sq / obs_n - mean * mean, 0.0)
        net.set_obs_normalization(mean, math.sqrt(var) if var > 0 else 1.0)
    net.freeze()
    return net


def train_step(net: ProposalNetwork, batch: list[Trace], opt: Adam, lr: float,
               group: Optional[WorkerGroup] = None) -> tuple[float, int, int]:
    """One synchronous step; returns (global mean loss, sub-minibatches,
    traces skipped for unknown addresses)."""
    skipped_before = net.skipped_unknown
    net.params.zero_grads()
    with T.Tape() as tape:
        loss = net.minibatch_loss(batch)
    T.backward(tape, loss)
    local_loss = loss.item()
    if group is not None and group.world_size > 1:
        exchange_gradients(group, net.params)
        global_loss = group.allreduce_scalar(local_loss)
    else:
        global_loss = local_loss
    opt.step(lr)
    net.train_step += 1
    return (global_loss, net.sub_minibatch_count(batch),
            net.skipped_unknown - skipped_before)


def _validation_loss(net: ProposalNetwork, dataset: TraceDataset,
                     val_positions: list[int], batch_size: int) -> float:
    total = 0.0
    count = 0
    for s in range(0, len(val_positions), batch_size):
        batch = [dataset.get(i) for i in val_positions[s:s + batch_size]]
        try:
            total += net.minibatch_loss(batch).item() * len(batch)
            count += len(batch)
        except UnknownAddress:
            continue
    return total / count if count else float("nan")


def train(net: ProposalNetwork, *,
          dataset: Optional[TraceDataset] = None,
          endpoint: Optional[Endpoint] = None,
          iterations: int = 1000,
          batch_size: int = 64,
          optimizer_config: OptimizerConfig = OptimizerConfig(),
          schedule: Optional[LrSchedule] = None,
          group: Optional[WorkerGroup] = None,
          seed: int = 0,
          val_fraction: float = 0.02,
          val_every: int = 100,
          buckets: int = 1,
          log_path: Optional[str] = None,
          checkpoint_path: Optional[str] = None,
          checkpoint_every: int = 0) -> list[TrainRecord]:
    """Synchronous data-parallel training loop (offline or online mode)."""
    if (dataset is None) == (endpoint is None):
        raise ValueError("provide exactly one of dataset or endpoint")
    if not net.frozen:
        net.freeze()
    if schedule is None:
        schedule = LrSchedule(kind="poly", lr0=1e-3, lr_final=1e-5,
                              total_steps=iterations, power=2)
    group = group if group is not None else WorkerGroup(0, 1)
    rank, world = group.rank, group.world_size
    verify_layout(group, net.params)
    broadcast_parameters(group, net.params)
    opt = Adam(net.params, optimizer_config)

    val_positions: list[int] = []
    batches: list[list[int]] = []
    epoch = 0
    if dataset is not None:
        n_val = int(math.ceil(val_fraction * len(dataset))) if val_fraction > 0 else 0
        train_positions = [i for i in range(len(dataset))
                           if dataset.index[i].original_index >= n_val]
        val_positions = [i for i in range(len(dataset))
                         if dataset.index[i].original_index < n_val]

        def epoch_batches(epoch_i: int) -> list[list[int]]:
            plan = plan_minibatches(dataset, batch_size, world,
                                    epoch_seed=seed + epoch_i, buckets=buckets,
                                    positions=train_positions)
            return [[train_positions[i] for i in plan.chunk_indices(c)]
                    for c in plan.worker_chunks(rank)]

        batches = epoch_batches(0)

    records: list[TrainRecord] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for it in range(iterations):
            t0 = time.perf_counter()
            if dataset is not None:
                if not batches:
                    epoch += 1
                    batches = epoch_batches(epoch)
                batch = [dataset.get(i) for i in batches.pop(0)]
            else:
                offset = (it * world + rank) * batch_size
                batch = sample_prior(endpoint, batch_size, seed=seed + 1,
                                     run_offset=offset)
            lr = schedule.lr_at(min(it, getattr(schedule, "total_steps", it)))
            loss, n_sub, skipped = train_step(net, batch, opt, lr, group)
            dt = time.perf_counter() - t0
            if math.isnan(loss) or math.isinf(loss):
                if checkpoint_path and rank == 0:
                    net.save(checkpoint_path + ".diverged")
                raise TrainingDiverged(f"loss {loss} at iteration {it}")
            val_loss = None
            if val_positions and val_every > 0 and (it + 1) % val_every == 0:
                val_loss = _validation_loss(net, dataset, val_positions, batch_size)
            rec = TrainRecord(iteration=it, loss=loss, lr=lr,
                              traces_per_sec=len(batch) * world / dt,
                              sub_minibatches=n_sub, skipped_traces=skipped,
                              val_loss=val_loss)
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(asdict(rec)) + "\n")
            if (checkpoint_path and checkpoint_every > 0 and rank == 0
                    and (it + 1) % checkpoint_every == 0):
                net.save(checkpoint_path)
        if checkpoint_path and rank == 0:
            net.save(checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    return records


def moving_average(values, window: int) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if window > x.size:
        raise ValueError("window longer than series")
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")
