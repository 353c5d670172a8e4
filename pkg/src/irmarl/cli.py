"""Command-line experiment runner.

Every command reads an optional TOML config (``--config``), merges it over the
defaults below and writes its artifacts to ``--out``. All randomness comes from
one 64-bit seed: ``SeedSequence(seed).spawn(4)`` yields the streams for game
generation, data collection, the actor-critic run and the quadratic study, in
that order. Quadratic job ``(N, k)`` uses the spawn key ``(..., N, k)`` under
the study stream, so results do not depend on ``--threads``.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .drac import DracParams, run_drac, theoretical_hyperparams
from .games import (
    NoiseSpec,
    ProductPolicy,
    game_from_dict,
    game_to_dict,
    policy_from_dict,
    policy_to_dict,
    random_game,
)
from .gap_eval import gap
from .model_learning import IRClassSpec, LearnedModel, fit_model
from .offline_data import BehaviorPolicy, generate_dataset, load_dataset, save_dataset
from .quadratic import ARMS, QuadraticConfig, run_job
from .svg import line_chart
from .verify import SUITES, run_suite

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_CONFIG, EXIT_STAGE, EXIT_VERIFY = 2, 3, 4
SEED_STREAMS = ("game", "data", "drac", "quadratic")
TRACE_COLUMNS = ("t", "i", "h", "max_chi2", "mean_Q", "cell_count")

DEFAULTS = {
    "seed": 0,
    "game": {"file": None, "N": 2, "H": 1, "C": 1, "S": 2, "A": 2, "K": 2, "noise": "bernoulli",
             "concentration": 1.0},
    "behavior": {"file": None},
    "data": {"file": None, "M": 1000, "shards": 1},
    "model": {"file": None, "K": 2, "alpha": 0.1, "ridge": 1e-8},
    "drac": {"T": 50, "lam": 0.01, "eta": 1.0, "critic": "exact", "M_sim": 1000, "theory": False,
             "eps": 0.01, "C_S": 1.0},
    "policy": {"file": None},
    "quadratic": {"N": [8, 16], "seeds": 10, "sigma": None, "M": None, "ratio": 0.1, "steps": 200,
                  "lr": 0.05, "alpha": 5.0, "bc_weight": 1.0, "init_scale": 0.1, "arms": list(ARMS)},
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- config


def _check_type(section: str, key: str, value, default):
    where = f"{section}.{key}" if section else key
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, (list, int))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def resolve_config(raw: dict, base_dir: Path = Path(".")) -> dict:
    """Merge ``raw`` over the defaults, reject unknown keys and make file paths absolute."""
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            for sub, v in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
                _check_type(key, sub, v, cfg[key][sub])
                cfg[key][sub] = v
        else:
            _check_type("", key, value, cfg[key])
            cfg[key] = value
    for section in ("game", "behavior", "data", "model", "policy"):
        path = cfg[section]["file"]
        if path is not None:
            cfg[section]["file"] = str((base_dir / path).resolve())
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    seed = cfg["seed"]
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    g = cfg["game"]
    for key in ("N", "H", "C", "S", "A", "K"):
        if g[key] < 1:
            raise ConfigError(f"game.{key} must be >= 1")
    if g["noise"] not in ("none", "bernoulli", "uniform"):
        raise ConfigError("game.noise must be none, bernoulli or uniform")
    if cfg["data"]["M"] < 1 or cfg["data"]["shards"] < 1:
        raise ConfigError("data.M and data.shards must be >= 1")
    if cfg["model"]["K"] < 1 or cfg["model"]["alpha"] < 0 or cfg["model"]["ridge"] < 0:
        raise ConfigError("model.K >= 1, model.alpha >= 0 and model.ridge >= 0 are required")
    d = cfg["drac"]
    if d["critic"] not in ("exact", "monte-carlo"):
        raise ConfigError("drac.critic must be exact or monte-carlo")
    if d["T"] < 1 or d["lam"] < 0 or d["eta"] <= 0 or d["M_sim"] < 1 or d["eps"] <= 0 or d["C_S"] <= 0:
        raise ConfigError("drac parameters out of range")
    q = cfg["quadratic"]
    Ns = q["N"] if isinstance(q["N"], list) else [q["N"]]
    if not Ns or any(not isinstance(n, int) or n < 2 for n in Ns):
        raise ConfigError("quadratic.N must be an integer >= 2 or a list of them")
    q["N"] = Ns
    if q["seeds"] < 1:
        raise ConfigError("quadratic.seeds must be >= 1")
    if q["sigma"] is not None and q["sigma"] < 0:
        raise ConfigError("quadratic.sigma must be >= 0")
    if q["sigma"] == 0 and q["M"] is None:
        raise ConfigError("quadratic.M is required when quadratic.sigma is 0")
    if q["M"] is not None and q["M"] < 1:
        raise ConfigError("quadratic.M must be >= 1")
    if q["steps"] < 0 or q["lr"] <= 0 or q["ratio"] <= 0 or q["bc_weight"] < 0 or q["init_scale"] < 0:
        raise ConfigError("quadratic parameters out of range")
    if not q["arms"] or any(a not in ARMS for a in q["arms"]):
        raise ConfigError(f"quadratic.arms must be drawn from {list(ARMS)}")


def load_config(path, seed=None) -> dict:
    raw = {}
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base_dir = path.parent
    if seed is not None:
        raw["seed"] = seed
    return resolve_config(raw, base_dir)


def input_file(cfg: dict, section: str, command: str) -> str:
    """Path of an input file the command needs; missing or absent files are config errors."""
    path = cfg[section]["file"]
    if path is None:
        raise ConfigError(f"{command} needs {section}.file")
    if not Path(path).is_file():
        raise ConfigError(f"{section}.file: no such file {path!r}")
    return path


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def seed_streams(seed: int) -> dict:
    return dict(zip(SEED_STREAMS, np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------- artifacts


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_trace(path: Path, trace: list, header: dict):
    with open(path, "w", newline="") as fh:
        fh.write("# " + ",".join(f"{k}={_fmt(v)}" for k, v in header.items()) + "\n")
        w = _csv_writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def read_trace_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise ValueError("trace file has no header line")
    return dict(item.split("=", 1) for item in first[2:].strip().split(","))


# ---------------------------------------------------------------- stages


def build_game(cfg: dict, streams: dict):
    g = cfg["game"]
    if g["file"] is not None:
        return game_from_dict(_read_json(input_file(cfg, "game", "game loading")))
    rng = np.random.default_rng(streams["game"])
    return random_game(rng, g["N"], g["H"], g["C"], g["S"], g["A"], min(g["K"], g["N"]),
                       noise=NoiseSpec(g["noise"]), transition_concentration=g["concentration"])


def build_behavior(cfg: dict, game) -> BehaviorPolicy:
    if cfg["behavior"]["file"] is None:
        return BehaviorPolicy(ProductPolicy.uniform(game))
    mix = policy_from_dict(_read_json(input_file(cfg, "behavior", "behavior loading")))
    if mix.T != 1:
        raise ValueError("behavior policy must be a single product policy")
    return BehaviorPolicy(mix.components[0])


def drac_params(cfg: dict, game) -> DracParams:
    d = cfg["drac"]
    T, eta, lam = d["T"], d["eta"], d["lam"]
    if d["theory"]:
        setting = "MG" if game.H > 1 or max(game.state_sizes) > 1 else "CG"
        T, eta, lam = theoretical_hyperparams(setting, cfg["model"]["K"], game.N, H=game.H, eps=d["eps"],
                                              C_S=d["C_S"])
    return DracParams(T, lam, eta, critic=d["critic"], M_sim=d["M_sim"], seed=0)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def stage_generate(cfg, streams, out: Path, h: str):
    with stage("generate-data"):
        game = build_game(cfg, streams)
        behavior = build_behavior(cfg, game)
        data = generate_dataset(game, behavior, cfg["data"]["M"], seed=_int_seed(streams["data"]),
                                shards=cfg["data"]["shards"])
        data.meta["config_hash"] = h
        _write_json(out / "game.json", {**game_to_dict(game), "config_hash": h})
        save_dataset(data, out / "dataset.jsonl")
    return game, behavior, data


def stage_fit(cfg, game, data, out: Path, h: str):
    with stage("fit"):
        m = cfg["model"]
        model = fit_model(game, data, IRClassSpec(m["K"], ridge=m["ridge"]), alpha=m["alpha"])
        _write_json(out / "model.json", {**model.to_dict(), "config_hash": h})
    return model


def stage_train(cfg, model: LearnedModel, behavior: BehaviorPolicy, streams, out: Path, h: str):
    with stage("train"):
        learned = model.as_game()
        params = drac_params(cfg, learned)
        params = DracParams(params.T, params.lam, params.eta, params.critic, params.M_sim,
                            seed=_int_seed(streams["drac"]))
        res = run_drac(model, behavior, params)
        _write_json(out / "policy.json", {**policy_to_dict(res.mixture), "config_hash": h})
        header = {"config_hash": h, "T": params.T, "eta": float(params.eta), "lam": float(params.lam),
                  "critic": params.critic, "B": float(res.B)}
        write_trace(out / "trace.csv", res.trace, header)
    return res


def stage_evaluate(game, policy, out: Path, h: str):
    with stage("evaluate"):
        report = gap(game, policy)
        doc = report.to_dict()
        doc["meta"] = {**doc["meta"], "config_hash": h}
        _write_json(out / "gap.json", doc)
        with open(out / "gap.csv", "w", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["config_hash", "N", "max_gap", "worst_agent"])
            w.writerow([h, game.N, _fmt(report.max_gap), int(report.gaps.argmax())])
    return report


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg, h):
    stage_generate(cfg, seed_streams(cfg["seed"]), _out(args), h)


def cmd_fit(args, cfg, h):
    out = _out(args)
    path = input_file(cfg, "data", "fit")
    with stage("fit"):
        data = load_dataset(path)
        game = build_game(cfg, seed_streams(cfg["seed"]))
    stage_fit(cfg, game, data, out, h)


def cmd_train(args, cfg, h):
    out = _out(args)
    path = input_file(cfg, "model", "train")
    with stage("train"):
        model = LearnedModel.from_dict(_read_json(path))
        behavior = build_behavior(cfg, model.as_game())
    stage_train(cfg, model, behavior, seed_streams(cfg["seed"]), out, h)


def cmd_evaluate(args, cfg, h):
    out = _out(args)
    path = input_file(cfg, "policy", "evaluate")
    with stage("evaluate"):
        game = build_game(cfg, seed_streams(cfg["seed"]))
        policy = policy_from_dict(_read_json(path))
    stage_evaluate(game, policy, out, h)


def cmd_pipeline(args, cfg, h):
    out = _out(args)
    streams = seed_streams(cfg["seed"])
    game, behavior, data = stage_generate(cfg, streams, out, h)
    model = stage_fit(cfg, game, data, out, h)
    res = stage_train(cfg, model, BehaviorPolicy(behavior.policy), streams, out, h)
    report = stage_evaluate(game, res.mixture, out, h)
    print(f"max gap {report.max_gap:.6g}")


def quadratic_config(q: dict, N: int) -> QuadraticConfig:
    kw = {k: q[k] for k in ("steps", "lr", "alpha", "bc_weight", "init_scale")}
    if q["sigma"] is None and q["M"] is None:
        return QuadraticConfig.matched_budget(N, ratio=q["ratio"], **kw)
    sigma = q["sigma"] if q["sigma"] is not None else q["ratio"] * q["M"] / N
    return QuadraticConfig(N=N, sigma=sigma, M=q["M"], ratio=q["ratio"], **kw)


def quadratic_study(cfg: dict, out: Path | None = None, threads: int = 1) -> dict:
    """Run every ``(N, seed)`` job; returns ``{N: {arm: (seeds, steps + 1) gap array}}``."""
    q = cfg["quadratic"]
    root = seed_streams(cfg["seed"])["quadratic"]
    data_dir = None
    if out is not None:
        data_dir = out / "quadratic_data"
        data_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(N, k) for N in q["N"] for k in range(q["seeds"])]

    def work(job):
        N, k = job
        path = data_dir / f"N{N}_seed{k}.csv" if data_dir is not None else None
        return run_job(quadratic_config(q, N), root, k, q["arms"], path)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, jobs))
    traces = {N: {arm: [] for arm in q["arms"]} for N in q["N"]}
    for (N, _), res in zip(jobs, results):
        for arm in q["arms"]:
            traces[N][arm].append(res[arm])
    return {N: {arm: np.array(v) for arm, v in per.items()} for N, per in traces.items()}


def cmd_quadratic(args, cfg, h):
    out = _out(args)
    q = cfg["quadratic"]
    with stage("quadratic"):
        traces = quadratic_study(cfg, out, args.threads)
        with open(out / "quadratic_trace.csv", "w", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["config_hash", "N", "seed", "arm", "step", "gap"])
            for N, per in traces.items():
                for k in range(q["seeds"]):
                    for arm, arr in per.items():
                        for step, value in enumerate(arr[k]):
                            w.writerow([h, N, k, arm, step, _fmt(value)])
        with open(out / "quadratic_summary.csv", "w", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["config_hash", "N", "sigma", "M", "arm", "mean_final_gap", "std_final_gap"])
            for N, per in traces.items():
                qc = quadratic_config(q, N)
                for arm, arr in per.items():
                    final = arr[:, -1]
                    w.writerow([h, N, _fmt(qc.sigma), qc.sample_count(), arm, _fmt(final.mean()),
                                _fmt(final.std())])
                    print(f"N={N} {arm}: mean final gap {final.mean():.4g}")
        for N, per in traces.items():
            series = {arm: (range(arr.shape[1]), arr.mean(0)) for arm, arr in per.items()}
            svg = line_chart(series, title=f"Quadratic game, N={N}", xlabel="actor step", ylabel="mean gap")
            (out / f"quadratic_N{N}.svg").write_text(svg)


def cmd_verify(args, cfg, h):
    if args.suite not in SUITES and args.suite != "all":
        raise ConfigError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES) + ['all']}")
    with stage("verify"):
        results = run_suite(args.suite, cfg["seed"])
    for r in results:
        print(r.line())
    if args.out is not None:
        out = _out(args)
        with open(out / "verify.csv", "w", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["config_hash", "suite", "checks", "worst_slack", "passed"])
            for r in results:
                w.writerow([h, r.name, r.checks, _fmt(r.worst_slack), int(r.passed)])
    return 0 if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {
    "generate-data": cmd_generate,
    "fit": cmd_fit,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "quadratic": cmd_quadratic,
    "verify": cmd_verify,
}


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=_seed, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="parallel jobs for the quadratic study")
    parser = argparse.ArgumentParser(prog="irmarl", description="Offline multi-agent RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "verify":
            p.add_argument("suite", help=f"one of {sorted(SUITES) + ['all']}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None and args.command != "verify":
        args.out = "irmarl_out"
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        code = COMMANDS[args.command](args, cfg, config_hash(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
