"""Operator command line.

Exit codes: 0 success, 2 usage error, 3 runtime failure. Observation files
are JSON: {"tag": "f64"|"i64"|"tensor", "value"|"data"/"shape": ...}.
Training configs are flat `key = value` text; see README for the keys.
"""

from __future__ import annotations

import json
import math
import os
import sys

import click
import numpy as np

from .collective import WorkerGroup
from .diagnostics import autocorrelation, autocorrelation_ess, gelman_rubin
from .endpoints import connect_endpoint
from .engines import importance_sample, rmh_run
from .optim import LrSchedule, OptimizerConfig, sub_sqrt_scaled_lr
from .proposal import NetworkConfig, ProposalNetwork
from .rng import CounterRng, RunRng
from .store import TraceDataset, sort_by_type, write_shards
from .trace import EntryKind
from .training import pregenerate_layers, train
from .values import Value
from . import endpoints as _endpoints
from . import results as R


def _load_observation(path: str) -> Value:
    with open(path, "r", encoding="utf-8") as f:
        spec = json.load(f)
    tag = spec["tag"]
    if tag == "f64":
        return Value.f64(spec["value"])
    if tag == "i64":
        return Value.i64(spec["value"])
    if tag == "tensor":
        return Value.tensor(np.asarray(spec["data"], dtype=float),
                            shape=spec.get("shape"))
    raise click.UsageError(f"unsupported observation tag {tag!r}")


def _dump_observation(path: str, v: Value):
    from .values import ValueTag
    if v.tag == ValueTag.F64:
        spec = {"tag": "f64", "value": v.payload}
    elif v.tag == ValueTag.I64:
        spec = {"tag": "i64", "value": v.payload}
    elif v.tag == ValueTag.TENSOR:
        spec = {"tag": "tensor", "shape": list(v.payload.shape),
                "data": v.payload.data.tolist()}
    else:
        raise click.UsageError(f"cannot serialize observation of tag {v.tag.name}")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec, f)


def _parse_config(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{line_no}: expected key = value")
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def _network_config(cfg: dict) -> NetworkConfig:
    kw = {}
    ints = ("lstm_hidden", "obs_embed_dim", "sample_embed_dim", "address_embed_dim",
            "mixture_components", "obs_dim", "head_hidden", "init_seed")
    for k in ints:
        if k in cfg:
            kw[k] = int(cfg[k])
    if "obs_embedder" in cfg:
        kw["obs_embedder"] = cfg["obs_embedder"]
    if "cnn_preset" in cfg:
        kw["cnn_preset"] = cfg["cnn_preset"]
    if "obs_grid" in cfg:
        kw["obs_grid"] = tuple(int(x) for x in cfg["obs_grid"].split(","))
    if cfg.get("preset", "desk") == "desk":
        return NetworkConfig.desk_scale(**kw)
    return NetworkConfig(**kw)


@click.group()
def main():
    """Simulator-inversion runtime: datasets, training, inference."""


@main.command()
@click.option("--endpoint", required=True, help="model:NAME | spawn:CMD | tcp:HOST:PORT | ipc:PATH")
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--shard-size", type=int, default=10_000, show_default=True)
def simulate(endpoint, n, seed, out, shard_size):
    """Record prior executions into an offline trace dataset."""
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    with connect_endpoint(endpoint) as ep:
        traces = _endpoints.sample_prior(ep, n, seed)
    ds = write_shards(traces, shard_size, out)
    click.echo(f"wrote {len(ds)} traces in {len(ds.shards)} shards to {out}")


@main.group()
def dataset():
    """Offline dataset maintenance."""


@dataset.command("sort")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--workers", type=int, default=2, show_default=True)
def dataset_sort(in_path, out, workers):
    """Sort a dataset by trace type (stable on original order)."""
    with TraceDataset(in_path) as ds:
        out_ds = sort_by_type(ds, workers, out)
    click.echo(f"sorted {len(out_ds)} traces into {out}")


@dataset.command("inspect")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
def dataset_inspect(in_path):
    """Print header info and the trace-type histogram."""
    with TraceDataset(in_path) as ds:
        click.echo(f"dataset {in_path}: {len(ds)} traces, "
                   f"{len(ds.shards)} shards, sorted={ds.sorted}, "
                   f"{len(ds.dictionary)} addresses")
        hist = sorted(ds.type_histogram().items(), key=lambda kv: -kv[1])
        for type_id, count in hist:
            click.echo(f"  type {type_id:016x}  {count}")
        lengths = ds.latent_counts()
        click.echo(f"latents per trace: min {lengths.min()} "
                   f"mean {lengths.mean():.2f} max {lengths.max()}")


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--rank", type=int, default=0, show_default=True)
@click.option("--world", type=int, default=1, show_default=True)
@click.option("--rendezvous", default=None, help="host:port of rank 0 (world > 1)")
@click.option("--iters", type=int, default=1000, show_default=True)
@click.option("--out", "checkpoint", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path())
def train_cmd(dataset_path, config_path, rank, world, rendezvous, iters,
              checkpoint, log_path):
    """Train the proposal network on an offline dataset."""
    cfg = _parse_config(config_path) if config_path else {}
    iters = int(cfg.get("iterations", iters))
    batch_size = int(cfg.get("batch_size", 64))
    lr0 = float(cfg.get("lr0", 1e-3))
    if int(cfg.get("sub_sqrt_scaling", "0")):
        lr0 = sub_sqrt_scaled_lr(lr0, world, float(cfg.get("lr_alpha", 0.5)))
    schedule = LrSchedule(kind=cfg.get("lr_schedule", "poly"), lr0=lr0,
                          lr_final=float(cfg.get("lr_final", lr0 / 50)),
                          total_steps=iters, power=int(cfg.get("lr_power", 2)))
    opt_cfg = OptimizerConfig(kind=cfg.get("optimizer", "adam"),
                              larc_eta=float(cfg.get("larc_eta", 0.001)))
    with TraceDataset(dataset_path) as ds:
        obs_dim = ds.get(0).observation
        net_cfg = dict(cfg)
        if "obs_dim" not in net_cfg and obs_dim is not None:
            net_cfg["obs_dim"] = str(obs_dim.numeric().size)
        net = pregenerate_layers(ds, _network_config(net_cfg))
        click.echo(f"registry: {len(net.layers)} addresses, "
                   f"{net.parameter_count()} parameters")
        group = WorkerGroup(rank, world, rendezvous)
        try:
            records = train(net, dataset=ds, iterations=iters, batch_size=batch_size,
                            optimizer_config=opt_cfg, schedule=schedule, group=group,
                            seed=int(cfg.get("seed", 0)),
                            val_fraction=float(cfg.get("val_fraction", 0.02)),
                            buckets=int(cfg.get("buckets", 1)),
                            log_path=log_path, checkpoint_path=checkpoint)
        finally:
            group.close()
    click.echo(f"final loss {records[-1].loss:.4f}; checkpoint at {checkpoint}")


main.add_command(train_cmd, name="train")


@main.command()
@click.option("--engine", type=click.Choice(["prior", "is", "ic", "rmh"]), required=True)
@click.option("--endpoint", required=True)
@click.option("--observation", "obs_path", type=click.Path(exists=True))
@click.option("--n", type=int, required=True, help="samples (IS) or iterations (RMH)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), help="required for --engine ic")
@click.option("--chains", type=int, default=1, show_default=True, help="RMH chains")
@click.option("--burn-in", type=int, default=None)
@click.option("--out", required=True, type=click.Path(), help="output file or prefix")
def infer(engine, endpoint, obs_path, n, seed, checkpoint, chains, burn_in, out):
    """Posterior inference; writes posterior sample files."""
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    observation = _load_observation(obs_path) if obs_path else None
    if engine in ("is", "ic", "rmh") and observation is None:
        raise click.UsageError(f"--engine {engine} requires --observation")
    meta = {"engine": engine, "seed": seed, "n": n}
    if engine == "ic":
        if checkpoint is None:
            raise click.UsageError("--engine ic requires --checkpoint")
        net = ProposalNetwork.load(checkpoint)
    with connect_endpoint(endpoint) as ep:
        if engine == "prior":
            traces = _endpoints.sample_prior(ep, n, seed, observation=None)
            post = R.from_weighted(
                __import__("simtrace.engines", fromlist=["WeightedTraceSet"])
                .WeightedTraceSet(traces, np.zeros(len(traces))), meta)
            R.write_posterior(out, post)
            click.echo(f"{n} prior samples -> {out}")
        elif engine in ("is", "ic"):
            ws = importance_sample(ep, observation, n, seed=seed,
                                   proposal=net if engine == "ic" else None)
            post = R.from_weighted(ws, meta)
            R.write_posterior(out, post)
            click.echo(f"ESS {ws.effective_sample_size():.1f} of {n} -> {out}")
        else:
            for c in range(chains):
                chain = rmh_run(ep, observation, n, seed=seed + c, burn_in=burn_in)
                post = R.from_chain(chain, meta={**meta, "chain": c,
                                                 "acceptance": chain.acceptance_rate})
                path = out if chains == 1 else f"{out}.chain{c}"
                R.write_posterior(path, post)
                click.echo(f"chain {c}: acceptance {chain.acceptance_rate:.3f} -> {path}")


@main.command()
@click.option("--chains", "chain_paths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--address", required=True, help="full address string")
@click.option("--instance", type=int, default=1, show_default=True)
@click.option("--max-lag", type=int, default=200, show_default=True)
def diagnose(chain_paths, address, instance, max_lag):
    """Autocorrelation, ESS and Gelman-Rubin over posterior chain files."""
    series = []
    for p in chain_paths:
        post = R.read_posterior(p)
        vals, _ = post.marginal(address, instance)
        if vals.size == 0:
            raise click.UsageError(f"{p} has no samples for {address}#{instance}")
        series.append(vals)
    shortest = min(len(s) for s in series)
    series = [s[:shortest] for s in series]
    lag = min(max_lag, shortest - 1)
    for i, s in enumerate(series):
        rho = autocorrelation(s, lag)
        ess = autocorrelation_ess(s, lag)
        click.echo(f"chain {i}: n={len(s)} rho1={rho[1]:.4f} ESS={ess:.1f}")
    if len(series) >= 2:
        click.echo(f"Gelman-Rubin R_hat = {gelman_rubin(series):.4f}")
    else:
        click.echo("Gelman-Rubin needs >= 2 chains")


@main.command()
@click.option("--a", "path_a", required=True, type=click.Path(exists=True))
@click.option("--b", "path_b", required=True, type=click.Path(exists=True))
@click.option("--histograms", "hist_dir", type=click.Path(), default=None,
              help="directory for per-address histogram CSVs")
@click.option("--bins", type=int, default=40, show_default=True)
def compare(path_a, path_b, hist_dir, bins):
    """Per-address histograms and Wasserstein-1 distances of two posteriors."""
    a = R.read_posterior(path_a)
    b = R.read_posterior(path_b)
    rows = R.compare_posteriors(a, b)
    click.echo(R.format_comparison(rows))
    if hist_dir:
        os.makedirs(hist_dir, exist_ok=True)
        for i, row in enumerate(rows):
            for tag, post in (("a", a), ("b", b)):
                vals, w = post.marginal(row.full, row.instance)
                R.write_histogram(os.path.join(hist_dir, f"addr{i}_{tag}.csv"),
                                  vals, w, bins=bins)
        click.echo(f"histograms in {hist_dir}")


@main.command("make-observation")
@click.option("--endpoint", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--latents", "latents_path", type=click.Path(), default=None)
def make_observation(endpoint, seed, out, latents_path):
    """Run the simulator once from the prior and save its observation."""
    with connect_endpoint(endpoint) as ep:
        t = _endpoints.sample_prior(ep, 1, seed)[0]
    _dump_observation(out, t.observation)
    if latents_path:
        lat = {f"{e.address.full}#{e.address.instance}": e.value.as_float()
               for e in t.entries if e.kind == EntryKind.LATENT and e.control}
        with open(latents_path, "w", encoding="utf-8") as f:
            json.dump(lat, f, indent=1)
    click.echo(f"observation (type {t.type_id:016x}) -> {out}")


@click.command()
@click.option("--model", type=click.Choice(["conjugate", "discrete", "cascade"]),
              required=True)
@click.option("--listen", default=None, help="tcp:HOST:PORT or ipc:PATH to serve on")
@click.option("--connect", "connect_addr", default=None, help="HOST:PORT to dial")
@click.option("--sessions", type=int, default=None, help="serve N sessions then exit")
def toy_sim(model, listen, connect_addr, sessions):
    """Run a built-in simulator as a standalone protocol peer."""
    from .models import get_model
    from .simclient import connect_and_serve, listen_and_serve
    model_fn = get_model(model)
    if (listen is None) == (connect_addr is None):
        raise click.UsageError("provide exactly one of --listen or --connect")
    if connect_addr is not None:
        host, _, port = connect_addr.rpartition(":")
        connect_and_serve(host, int(port), model_fn, name=model)
        return
    scheme, _, rest = listen.partition(":")
    if scheme == "tcp":
        host, _, port = rest.rpartition(":")
        listen_and_serve(model_fn, host, int(port), name=model,
                         max_sessions=sessions,
                         ready_callback=lambda a: click.echo(f"listening on {a[0]}:{a[1]}",
                                                             err=True))
    elif scheme == "ipc":
        listen_and_serve(model_fn, name=model, max_sessions=sessions, unix_path=rest)
    else:
        raise click.UsageError(f"unknown listen spec {listen!r}")


def _run(cmd):
    try:
        cmd(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(2)
    except click.exceptions.Exit as e:
        sys.exit(e.exit_code)
    except click.Abort:
        sys.exit(2)
    except Exception as e:  # runtime failure
        click.echo(f"error: {e}", err=True)
        sys.exit(3)


def main_entry():
    _run(main)


def toy_sim_entry():
    _run(toy_sim)


if __name__ == "__main__":
    main_entry()
