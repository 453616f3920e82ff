"""Command line entry point: ``pacsnoc <command> [--config cfg.json] [--seed N] [--out DIR]``.

Every command writes its resolved config next to its outputs so a rerun from
that file reproduces them. Failures print a JSON object on stderr and exit 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .controllers import ControllerParams
from .dynamics import NoiseDataset
from .errors import ConfigurationError, PacSnocError

log = logging.getLogger("pacsnoc")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _log_csv(path: Path, records: list[dict]) -> None:
    if not records:
        _write_csv(path, ["iteration"], [])
        return
    keys = list(records[0])
    _write_csv(path, keys, [[r[k] for k in keys] for r in records])


def load_config(args) -> ex.ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        if args.profile:
            raw["profile"] = args.profile
        cfg = ex.ExperimentConfig.from_dict(raw)
    elif args.scenario == "robots":
        cfg = ex.ExperimentConfig.robots(args.profile or "ci")
    else:
        cfg = ex.ExperimentConfig.lti().with_profile(args.profile)
    over = {}
    if args.seed is not None:
        over["seed"] = int(args.seed)
    if args.out is not None:
        over["out"] = args.out
    return cfg.updated(over) if over else cfg


def _out_dir(cfg: ex.ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return out


def _train_dataset(args, cfg):
    if getattr(args, "dataset", None):
        data = NoiseDataset.load_csv(args.dataset)
        if data.horizon != cfg.T:
            raise ConfigurationError(f"dataset horizon {data.horizon} does not match config T={cfg.T}")
        return data
    return None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    out = _out_dir(cfg)
    sc = ex.build_scenario(cfg)
    sc.dataset().save_csv(out / "train.csv")
    sc.test_dataset().save_csv(out / "test.csv")
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv")}


def cmd_train_empirical(args, cfg):
    out = _out_dir(cfg)
    params, records = ex.train_empirical(cfg, _train_dataset(args, cfg))
    params.save(out / "controller_empirical.json")
    _log_csv(out / "train_empirical_log.csv", records)
    return {"controller": str(out / "controller_empirical.json"), "iterations": len(records)}


def cmd_train_benchmark(args, cfg):
    out = _out_dir(cfg)
    params, records = ex.train_benchmark(cfg)
    params.save(out / "controller_benchmark.json")
    _log_csv(out / "train_benchmark_log.csv", records)
    return {"controller": str(out / "controller_benchmark.json"), "k": params.theta[0], "beta": params.theta[1]}


def cmd_train_svgd(args, cfg):
    out = _out_dir(cfg)

    def progress(it, X, rec):
        if it % 50 == 0:
            log.info("iteration %d  mean capped cost %.4f", it, rec["mean_cost"])

    ens, records, lam = ex.train_pac(cfg, _train_dataset(args, cfg), callback=progress)
    _write_json(out / "ensemble.json", {"lam": lam, "particles": ens.to_records()})
    _write_csv(out / "train_svgd_log.csv", ["iteration", "mean_cost", "max_grad_norm", "bandwidth"],
               [[r["iteration"], r["mean_cost"], r["max_grad_norm"], r["bandwidth"]] for r in records])
    sampled = ex.sample_particle(ens, cfg.seed)
    sampled.save(out / "controller_svgd.json")
    return {"ensemble": str(out / "ensemble.json"), "controller": str(out / "controller_svgd.json"),
            "lam": lam, "particle": sampled.provenance["particle"]}


def cmd_certify(args, cfg):
    out = _out_dir(cfg)
    cert = ex.certify(cfg, args.mode, _train_dataset(args, cfg))
    path = out / f"certificate_{cert.mode}.json"
    _write_json(path, cert.to_dict())
    return {"certificate": str(path), "bound": cert.bound, "statement": cert.statement}


def cmd_evaluate(args, cfg):
    out = _out_dir(cfg)
    params = ControllerParams.load(args.controller)
    rep = ex.evaluate(params, cfg, certificate=args.certificate, dataset=_train_dataset(args, cfg))
    d = rep.to_dict()
    if cfg.scenario == "robots":
        d["bounded"] = ex.bounded_rollout(params, cfg)
    path = out / f"evaluation_{Path(args.controller).stem}.json"
    _write_json(path, d)
    return {"report": str(path), "test_cost": rep.test_cost}


def cmd_bound_study(args, cfg):
    out = _out_dir(cfg)

    def progress(row):
        log.info("s=%d delta=%.2f %s bound=%.4f max true=%.4f", row["s"], row["delta"], row["prior"],
                 row["bound"], max(row["true_costs"]))

    rows = ex.bound_study(cfg, progress)
    header, body = ex.study_rows_csv(rows)
    _write_csv(out / "bound_study.csv", header, body)
    below = all(max(r["true_costs"]) <= r["bound"] for r in rows)
    return {"csv": str(out / "bound_study.csv"), "cells": len(rows), "all_below_bound": below}


def cmd_grid_posterior(args, cfg):
    out = _out_dir(cfg)
    gp = ex.grid_posterior(cfg, _train_dataset(args, cfg))
    _write_csv(out / "grid_posterior.csv", ["beta", "k", "mass"], gp.rows())
    m_beta, m_k = gp.marginals()
    _write_csv(out / "grid_marginal_beta.csv", ["beta", "mass"], zip(gp.beta_centers, m_beta))
    _write_csv(out / "grid_marginal_k.csv", ["k", "mass"], zip(gp.k_centers, m_k))
    cert = gp.bound(cfg.delta, cfg.C, cfg.s)
    beta, k = gp.mode()
    summary = {"lam": gp.lam, "log_z": gp.log_z, "mode": {"beta": beta, "k": k}, "bound": cert.bound,
               "prior_coverage": gp.prior_coverage(ex.make_prior(ex.build_scenario(cfg)))}
    _write_json(out / "grid_posterior.json", summary)
    return {"csv": str(out / "grid_posterior.csv"), **summary}


COMMANDS = {
    "gen-data": (cmd_gen_data, "draw and save the training and test noise sets"),
    "train-empirical": (cmd_train_empirical, "minimize the uncapped empirical cost"),
    "train-benchmark": (cmd_train_benchmark, "fit the LTI oracle controller"),
    "train-svgd": (cmd_train_svgd, "sample the Gibbs posterior with SVGD"),
    "certify": (cmd_certify, "compute the high-probability bound on the true cost"),
    "evaluate": (cmd_evaluate, "test-set cost (and collision rate) of a saved controller"),
    "bound-study": (cmd_bound_study, "bound vs sampled true costs over (s, delta, prior)"),
    "grid-posterior": (cmd_grid_posterior, "gridded Gibbs posterior over (beta, k)"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (needs schema_version)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=sorted(ex.PROFILES), help="robot desk-scale profile")
    common.add_argument("--scenario", choices=["lti", "robots"], default="lti",
                        help="scenario when no config file is given")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pacsnoc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in COMMANDS.items()}
    for name in ("train-empirical", "train-svgd", "certify", "evaluate", "grid-posterior"):
        parsers[name].add_argument("--dataset", help="training noise CSV written by gen-data")
    parsers["certify"].add_argument("--mode", choices=["exact", "empirical"])
    parsers["evaluate"].add_argument("--controller", required=True, help="controller JSON")
    parsers["evaluate"].add_argument("--certificate", help="certificate file to reference in the report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args)
        fn, _ = COMMANDS[args.command]
        result = fn(args, cfg)
    except PacSnocError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    result["seconds"] = round(time.perf_counter() - t0, 3)
    print(json.dumps(result, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
