"""Standard-benchmark training runs used by the acceptance checks, cached on disk.

Each run is keyed by a hash of its full recipe (network config, loss config,
data recipe, seed), so a cached checkpoint is reused only for an identical
recipe.  Run ``python -m revsep.experiments --cache DIR [names...]`` to
populate the cache ahead of time.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict

from revsep.data import BENCHMARK, DegradationSpec, benchmark_splits
from revsep.losses import LossWeightsConfig
from revsep.network import NetworkConfig, load_checkpoint
from revsep.training import blco_train, train

LOWLIGHT = DegradationSpec("lowlight", 0.6, 0)
DEFAULT_CACHE = os.environ.get("REVSEP_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "revsep"))

RUNS = {
    "main": dict(net=dict(), degradation=None, mode="train"),
    "k1": dict(net=dict(K=1), degradation=None, mode="train"),
    "fine_off": dict(net=dict(fine_stages=()), degradation=None, mode="train"),
    "plain_lowlight": dict(net=dict(), degradation=LOWLIGHT, mode="train"),
    "blco_lowlight": dict(net=dict(), degradation=LOWLIGHT, mode="blco"),
    "tandem_lowlight": dict(net=dict(), degradation=LOWLIGHT, mode="tandem"),
}


def recipe(name, seed=0, epochs=None):
    spec = RUNS[name]
    loss_cfg = LossWeightsConfig() if epochs is None else LossWeightsConfig(epochs=epochs)
    deg = spec["degradation"]
    return {
        "name": name,
        "mode": spec["mode"],
        "net": NetworkConfig(**spec["net"]).to_dict(),
        "loss": asdict(loss_cfg),
        "data": dict(BENCHMARK, degradation=asdict(deg) if deg else None),
        "seed": seed,
    }


def recipe_key(rec) -> str:
    blob = json.dumps(rec, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def splits_for(rec):
    d = dict(rec["data"])
    deg = d.pop("degradation")
    return benchmark_splits(**d, degradation=DegradationSpec(**deg) if deg else None)


def run(name, cache_dir=DEFAULT_CACHE, seed=0, epochs=None, force=False):
    """Train (or reuse) one named run; returns ``(net, run_dir, recipe)``."""
    rec = recipe(name, seed, epochs)
    run_dir = os.path.join(cache_dir, f"{name}-{recipe_key(rec)}")
    ckpt = os.path.join(run_dir, "checkpoint.pt")
    if os.path.exists(ckpt) and not force:
        net, _ = load_checkpoint(ckpt)
        return net, run_dir, rec
    os.makedirs(run_dir, exist_ok=True)
    splits = splits_for(rec)
    net_cfg = NetworkConfig(**rec["net"])
    loss_cfg = LossWeightsConfig(**rec["loss"])
    kwargs = dict(seed=seed, val=splits["val"], log_path=os.path.join(run_dir, "log.csv"))
    start = time.time()
    tmp = ckpt + ".partial"
    if rec["mode"] == "train":
        result = train(splits["train"], net_cfg, loss_cfg, ckpt_path=tmp, **kwargs)
    else:
        result = blco_train(splits["train"], net_cfg, loss_cfg, exchange=rec["mode"] == "blco", ckpt_path=tmp, **kwargs)
    os.replace(tmp, ckpt)
    with open(os.path.join(run_dir, "recipe.json"), "w") as fh:
        json.dump(dict(rec, train_seconds=time.time() - start), fh, indent=2, sort_keys=True)
    return result.net, run_dir, rec


def main(argv=None):
    parser = argparse.ArgumentParser(description="populate the benchmark run cache")
    parser.add_argument("names", nargs="*", help=f"subset of {', '.join(RUNS)} (default: all)")
    parser.add_argument("--cache", default=DEFAULT_CACHE)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args(argv)
    unknown = set(args.names) - set(RUNS)
    if unknown:
        parser.error(f"unknown run(s): {', '.join(sorted(unknown))}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.names or list(RUNS):
        _, run_dir, _ = run(name, args.cache, args.seed, force=args.force)
        print(name, run_dir, flush=True)


if __name__ == "__main__":
    main()
