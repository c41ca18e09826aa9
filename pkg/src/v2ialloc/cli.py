"""Command-line entry points: train, eval, sweep, inspect-scenario.

Every command writes plain CSV files whose content depends only on the
config and seeds, so reruns are byte-identical.  ``V2IALLOC_OUTPUT_DIR``
overrides the output directory from both the config file and ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .agents import HPPOAgent
from .config import ConfigError, RunConfig, dump_config, load_config
from .env import CoopPerceptionEnv
from .runner import (
    BANDWIDTH_SWEEP_HZ,
    PERIOD_SWEEP_MS,
    NonFiniteError,
    build_policies,
    channel_seed_for,
    run_episode,
    summarize,
    test_seeds,
    train_hppo,
    validation_seeds,
)
from .scenario import generate_scenario, save_scenario

log = logging.getLogger("v2ialloc")

OUTPUT_ENV_VAR = "V2IALLOC_OUTPUT_DIR"
METRICS_SCHEMA = "v2ialloc-metrics/1"
METRICS_FIELDS = ("run_id", "seed", "bandwidth_hz", "period_ms", "policy", "episode",
                  "mean_return", "sum_rate_mbps", "L_det", "L_cls", "ap50", "ap70")
SUMMARY_FIELDS = ("run_id", "bandwidth_hz", "period_ms", "policy", "n",
                  "mean_return", "mean_return_se", "sum_rate_mbps", "sum_rate_mbps_se",
                  "L_det", "L_det_se", "L_cls", "L_cls_se", "ap50", "ap50_se", "ap70", "ap70_se")
EPISODE_LOG_FIELDS = ("episode", "step", "cav", "rb", "power_dbm", "rate_bps", "budget",
                      "cells_sent", "L_det", "L_cls", "reward")
CONFIDENCE_FIELDS = ("step", "cav_id", "total_confidence", "rate_bps")
TRAIN_FIELDS = ("episode", "mean_return", "rb_actor_obj", "rb_critic_loss",
                "power_actor_obj", "power_critic_loss")
VALID_FIELDS = ("episode", "mean_return")
CHECKPOINT_NAME = "hppo.npz"


class CLIError(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class CsvTable:
    """Single writer for one CSV file with a versioned comment header."""

    def __init__(self, path: Path, fields, schema: str):
        self.path = path
        self.fields = tuple(fields)
        self._fh = open(path, "w", newline="")
        self._fh.write(f"# {schema}\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.fields)

    def row(self, **values) -> None:
        self._w.writerow([_fmt(values[f]) for f in self.fields])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this module (comment header skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- helpers -----------------------------------------------------------------

def output_dir(cfg: RunConfig) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV_VAR) or cfg.run.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise CLIError(f"output directory {out} is not writable")
    return out


def _make_env(cfg: RunConfig, **overrides) -> CoopPerceptionEnv:
    channel = dataclasses.replace(cfg.channel, **{k: v for k, v in overrides.items()
                                                  if k == "total_bandwidth_hz"})
    env_cfg = dataclasses.replace(cfg.env, **{k: v for k, v in overrides.items()
                                              if k == "period_ms"})
    return CoopPerceptionEnv(env_cfg, channel, cfg.scenario)


def _eval_seeds(cfg: RunConfig) -> list[int]:
    if cfg.run.seeds:
        seeds = list(cfg.run.seeds)
        return seeds if cfg.run.episodes is None else seeds[:cfg.run.episodes]
    return test_seeds(cfg.run.episodes if cfg.run.episodes is not None else 300)


def _checkpoint_path(cfg: RunConfig) -> Path | None:
    return Path(cfg.run.checkpoint) if cfg.run.checkpoint else None


def _policies(cfg: RunConfig, env: CoopPerceptionEnv) -> dict:
    names = cfg.policies()
    ckpt = _checkpoint_path(cfg)
    agent = None
    if "hppo" in names:
        if ckpt is None or not ckpt.exists():
            if cfg.run.policy == "hppo":
                raise CLIError(f"hppo evaluation needs a checkpoint; not found: {ckpt}")
            log.warning("no checkpoint given; skipping hppo")
            names = [n for n in names if n != "hppo"]
        else:
            agent = HPPOAgent.load(ckpt, env.channel_params)
    return build_policies(names, env.channel_params, env.n_cavs, agent=agent,
                          seed=cfg.hppo.seed)


def _evaluate(env, policy, seeds, seed: int):
    if getattr(policy, "name", "") == "random":
        policy.rng = np.random.default_rng(seed)
    if hasattr(policy, "mode"):
        policy.mode = "greedy"
    return [run_episode(env, policy, s) for s in seeds]


def _metrics_rows(table, cfg, env, policy_name, seeds, results):
    for i, (s, r) in enumerate(zip(seeds, results)):
        table.row(run_id=cfg.run.run_id, seed=s, bandwidth_hz=env.channel_params.total_bandwidth_hz,
                  period_ms=env.config.period_ms, policy=policy_name, episode=i,
                  mean_return=r.total_return, sum_rate_mbps=r.sum_rate_mbps,
                  L_det=r.loss_det, L_cls=r.loss_cls, ap50=r.ap50, ap70=r.ap70)


def _summary_row(table, cfg, env, policy_name, results):
    s = summarize(results)
    table.row(run_id=cfg.run.run_id, bandwidth_hz=env.channel_params.total_bandwidth_hz,
              period_ms=env.config.period_ms, policy=policy_name, n=s["n"],
              mean_return=s["total_return"], mean_return_se=s["total_return_se"],
              sum_rate_mbps=s["sum_rate_mbps"], sum_rate_mbps_se=s["sum_rate_mbps_se"],
              L_det=s["loss_det"], L_det_se=s["loss_det_se"],
              L_cls=s["loss_cls"], L_cls_se=s["loss_cls_se"],
              ap50=s["ap50"], ap50_se=s["ap50_se"], ap70=s["ap70"], ap70_se=s["ap70_se"])
    return s


# -- commands ----------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> dict:
    out = output_dir(cfg)
    env = _make_env(cfg)
    episodes = cfg.run.episodes if cfg.run.episodes is not None else cfg.hppo.train_episodes
    (out / "config.yaml").write_text(dump_config(cfg))
    agent, tlog = train_hppo(env, cfg.hppo, episodes=episodes, valid_seeds=validation_seeds(),
                             eval_every=cfg.run.valid_every)
    ckpt = _checkpoint_path(cfg) or out / CHECKPOINT_NAME
    agent.save(ckpt)
    with CsvTable(out / "training_stats.csv", TRAIN_FIELDS, "v2ialloc-train/1") as t:
        for u in tlog.updates:
            t.row(**{f: u[f] for f in TRAIN_FIELDS})
    with CsvTable(out / "validation.csv", VALID_FIELDS, "v2ialloc-validation/1") as t:
        for ep, ret in tlog.validation:
            t.row(episode=ep, mean_return=ret)
    return {"checkpoint": ckpt, "log": tlog}


def cmd_eval(cfg: RunConfig, episode_log: bool = False) -> dict:
    out = output_dir(cfg)
    env = _make_env(cfg)
    seeds = _eval_seeds(cfg)
    policies = _policies(cfg, env)
    summaries = {}
    with CsvTable(out / "metrics.csv", METRICS_FIELDS, METRICS_SCHEMA) as mt, \
            CsvTable(out / "summary.csv", SUMMARY_FIELDS, "v2ialloc-summary/1") as st:
        for name, policy in policies.items():
            results = _evaluate(env, policy, seeds, cfg.hppo.seed)
            _metrics_rows(mt, cfg, env, name, seeds, results)
            if results:
                summaries[name] = _summary_row(st, cfg, env, name, results)
    if episode_log and seeds:
        write_episode_logs(cfg, env, policies, seeds[0], out)
    return summaries


def write_episode_logs(cfg: RunConfig, env, policies: dict, seed: int, out: Path) -> None:
    """Per-step CSVs for one scenario: allocation/budget log and confidence trace."""
    for name, policy in policies.items():
        if getattr(policy, "name", "") == "random":
            policy.rng = np.random.default_rng(cfg.hppo.seed)
        conf_rows = []

        def trace(env_, alloc, res, rows=conf_rows):
            remaining = env_.ledger.remaining_conf.sum(axis=(1, 2))
            for m in range(env_.n_cavs):
                rows.append((res.info.t, m + 1, remaining[m], res.info.rates_bps[m]))

        result = run_episode(env, policy, seed, record=True, check=trace)
        with CsvTable(out / f"episode_log_{name}.csv", EPISODE_LOG_FIELDS,
                      "v2ialloc-episode-log/1") as t:
            for reward, info in result.steps:
                for m in range(env.n_cavs):
                    t.row(episode=seed, step=info.t, cav=m + 1, rb=int(info.rbs[m]),
                          power_dbm=info.power_dbm[m], rate_bps=info.rates_bps[m],
                          budget=info.budgets[m], cells_sent=int(info.cells_sent[m]),
                          L_det=info.loss_after.det, L_cls=info.loss_after.cls, reward=reward)
        with CsvTable(out / f"confidence_{name}.csv", CONFIDENCE_FIELDS,
                      "v2ialloc-confidence/1") as t:
            for step, cav, total, rate in conf_rows:
                t.row(step=step, cav_id=cav, total_confidence=total, rate_bps=rate)


def sweep_values(axis: str) -> tuple:
    if axis == "bandwidth":
        return BANDWIDTH_SWEEP_HZ
    if axis == "period":
        return PERIOD_SWEEP_MS
    raise CLIError(f"unknown sweep axis {axis!r}")


def cmd_sweep(cfg: RunConfig, axis: str | None = None) -> dict:
    axis = axis or cfg.run.sweep_axis
    values = sweep_values(axis)
    out = output_dir(cfg)
    seeds = _eval_seeds(cfg)
    key = "total_bandwidth_hz" if axis == "bandwidth" else "period_ms"
    summaries = {}
    with CsvTable(out / f"sweep_{axis}.csv", METRICS_FIELDS, METRICS_SCHEMA) as mt, \
            CsvTable(out / f"sweep_{axis}_summary.csv", SUMMARY_FIELDS, "v2ialloc-summary/1") as st:
        for value in values:
            env = _make_env(cfg, **{key: value})
            # hppo is trained at the config bandwidth and reused unchanged at every value
            for name, policy in _policies(cfg, env).items():
                results = _evaluate(env, policy, seeds, cfg.hppo.seed)
                _metrics_rows(mt, cfg, env, name, seeds, results)
                if results:
                    summaries[(value, name)] = _summary_row(st, cfg, env, name, results)
    return summaries


def cmd_inspect_scenario(cfg: RunConfig, seed: int, stream=None) -> Path:
    stream = stream or sys.stdout
    out = output_dir(cfg)
    sc = generate_scenario(dataclasses.replace(cfg.scenario, seed=seed))
    path = out / f"scenario_{seed}.json"
    save_scenario(sc, path)
    env = _make_env(cfg)
    env.reset(seed, channel_seed_for(seed), scenario=sc)
    h, w = sc.shape
    print(f"scenario seed {seed}: {h}x{w} grid, {len(sc.objects)} objects, "
          f"{int(sc.occupancy.sum())} occupied cells", file=stream)
    values = env.ledger.feature_values()
    for i in range(sc.n_cavs + 1):
        who = "RSU" if i == 0 else f"CAV {i}"
        x, y = sc.agent_xy[i]
        line = f"  {who:6s} at ({x:6.1f}, {y:6.1f}) m, visible cells {int((sc.visibility[i] > 0).sum())}"
        if i > 0:
            line += f", feature value {values[i - 1]:.3f}"
        print(line, file=stream)
    print(f"  initial L_det {env.loss.det:.4f}, RSU-only AP@0.5 "
          f"{env.average_precision()[0.5]:.3f}", file=stream)
    print(f"wrote {path}", file=stream)
    return path


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2ialloc",
                                     description="RSU-side V2I resource allocation simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="master seed (agent init, random policy)")
    common.add_argument("--episodes", type=int, help="training episodes or evaluation seeds")
    common.add_argument("--policy", choices=("all", "random", "max_rate", "max_features", "hppo"))
    common.add_argument("--checkpoint", help="HPPO checkpoint path")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the HPPO agent")
    p = sub.add_parser("eval", parents=[common], help="evaluate policies on test seeds")
    p.add_argument("--episode-log", action="store_true",
                   help="also write per-step logs for the first seed")
    p = sub.add_parser("sweep", parents=[common], help="bandwidth or period sweep")
    p.add_argument("--axis", choices=("bandwidth", "period"))
    sub.add_parser("inspect-scenario", parents=[common], help="dump one scenario as JSON")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run = cfg.run
    run.command = args.command
    if args.episodes is not None:
        run.episodes = args.episodes
    if args.policy is not None:
        run.policy = args.policy
    if args.checkpoint is not None:
        run.checkpoint = args.checkpoint
    if args.out is not None:
        run.output_dir = args.out
    if args.seed is not None and args.command != "inspect-scenario":
        cfg.hppo.seed = args.seed
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            res = cmd_train(cfg)
            print(f"wrote {res['checkpoint']}")
        elif args.command == "eval":
            for name, s in cmd_eval(cfg, episode_log=args.episode_log).items():
                print(f"{name:13s} return {s['total_return']:.3f}  ap50 {s['ap50']:.3f}"
                      f"±{s['ap50_se']:.3f}  ap70 {s['ap70']:.3f}±{s['ap70_se']:.3f}")
        elif args.command == "sweep":
            cmd_sweep(cfg, args.axis)
        else:
            seed = args.seed if args.seed is not None else cfg.scenario.seed
            cmd_inspect_scenario(cfg, seed)
    except (ConfigError, CLIError, FileNotFoundError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
