"""Command line: ``python -m gridrl {train,evaluate,sweep,report,serve}``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import agents, bench, envbridge
from .mdpenv import baseline_sections, bundled_config_paths, load_configs


def _configs(args):
    d_sim, d_train = bundled_config_paths(args.task)
    return load_configs(args.sim_config or d_sim, args.train_config or d_train)


def _scenarios(name: str) -> bench.ScenarioSet:
    """A bundled suite name (``uvls960``, ``brake220:50``) or a scenario-set JSON file."""
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return bench.ScenarioSet.from_json(p.read_text())
    return bench.named_suite(name)


def parse_controller(text: str) -> bench.ControllerSpec:
    """``name=kind[:checkpoint][,key=value...]``, e.g. ``mpc10=mpc,internal_param_scale=1.1``."""
    head, *opts = text.split(",")
    name, sep, kind = head.partition("=")
    if not sep:
        name, kind = head, head
    kind, _, ckpt = kind.partition(":")
    options = []
    for o in opts:
        k, sep, v = o.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"bad controller option {o!r}")
        try:
            v = json.loads(v)
        except ValueError:
            pass
        options.append((k, v))
    return bench.ControllerSpec(name, kind, ckpt or None, tuple(options))


def _with_sections(spec: bench.ControllerSpec, sections: dict) -> bench.ControllerSpec:
    """Config-file relay/mpc settings under the per-controller options."""
    base = sections.get(spec.kind)
    if not base:
        return spec
    merged = {**base, **spec.option_dict()}
    return bench.ControllerSpec(spec.name, spec.kind, spec.checkpoint, tuple(sorted(merged.items())))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    env_cfg, sampler, dqn = _configs(args)
    out = _out(args)
    if args.steps is not None:
        dqn["total_steps"] = args.steps
    if args.seed is not None:
        dqn["seed"] = args.seed
    if args.agent == "qtable":
        from .mdpenv import GridEnv
        table, rewards = agents.train_tabular_q(GridEnv(env_cfg), sampler, dqn["total_steps"],
                                                seed=dqn.get("seed", 0))
        agents.save_qtable(out / "qtable.json", table)
        print(f"q-table written to {out / 'qtable.json'} after {len(rewards)} episodes")
        return 0
    config = agents.TrainConfig.from_mapping(dqn)
    t0 = time.time()

    def progress(step, log):
        if args.verbose and len(log.rows) % 100 == 0:
            print(f"step {step} episode {len(log.rows)} ma {log.rows[-1][3]:.1f}", file=sys.stderr)

    _, log = agents.train_dqn(
        lambda: agents.ScenarioTrainingEnv(env_cfg, sampler, seed=config.seed, noise_sigma=args.noise),
        config, checkpoint_path=out / "checkpoint.json", log_path=out / "training_log.csv",
        progress=progress)
    print(f"trained {config.total_steps} steps in {time.time() - t0:.0f} s, {len(log.rows)} episodes, "
          f"best moving average {log.best_moving_average:.2f}")
    return 0


def cmd_evaluate(args) -> int:
    env_cfg, _, _ = _configs(args)
    out = _out(args)
    scen = _scenarios(args.scenarios)
    if args.noise:
        scen = scen.with_noise(args.noise)
    sections = baseline_sections(args.sim_config or bundled_config_paths(args.task)[0])
    specs = [_with_sections(parse_controller(c), sections) for c in args.controller]
    traj = None
    if args.trajectories:
        traj = out / "trajectories"
        traj.mkdir(exist_ok=True)
    recs = bench.run_benchmark(specs, scen, env_cfg, args.parallelism, str(traj) if traj else None)
    bench.write_records_csv(recs, out / "records.csv")
    for s in specs:
        rs = [r for r in recs if r.controller == s.name]
        errs = sum(bool(r.error) for r in rs)
        mean = sum(r.reward for r in rs) / len(rs) if rs else 0.0
        print(f"{s.name}: {len(rs)} runs, mean reward {mean:.2f}, stable "
              f"{bench.stability_rate(recs, s.name):.3f}, latency {bench.mean_latency(recs, s.name) * 1e3:.2f} ms, "
              f"errors {errs}")
    return 0


def cmd_sweep(args) -> int:
    """Write a suite to JSON; for uvls also run the no-op pass and write the FIDVR-positive subset."""
    env_cfg, _, _ = _configs(args)
    out = _out(args)
    suite = _scenarios(args.scenarios or ("uvls960" if args.task == "uvls" else "brake220"))
    (out / "scenarios.json").write_text(suite.to_json())
    print(f"{suite.name}: {len(suite)} scenarios, sha256 {suite.content_hash()}")
    if args.task == "uvls":
        noop = bench.run_benchmark([bench.ControllerSpec("noop", "noop")], suite, env_cfg, args.parallelism)
        bench.write_records_csv(noop, out / "noop_records.csv")
        pos = bench.filter_fidvr_positive(suite, noop)
        (out / "fidvr_positive.json").write_text(pos.to_json())
        print(f"FIDVR-positive without action: {len(pos)} of {len(suite)}")
    return 0


def cmd_report(args) -> int:
    out = _out(args)
    recs = bench.read_records_csv(args.records)
    rep = bench.reward_difference_report(recs, args.a, args.b, args.bin_width)
    bench.write_report(rep, out / f"report_{args.a}_vs_{args.b}.json",
                       out / f"histogram_{args.a}_vs_{args.b}.csv")
    print(f"{args.a} vs {args.b}: n={rep['n']} win {rep['win_rate']:.3f} tie {rep['tie_rate']:.3f} "
          f"loss {rep['loss_rate']:.3f} mean diff {rep['mean_diff']:.2f}")
    return 0


def cmd_serve(args) -> int:
    if args.port is not None:
        envbridge.serve(f"tcp:{args.host}:{args.port}")
    else:
        envbridge.serve("stdio")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m gridrl")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--task", choices=("brake", "uvls"), default="uvls")
        sp.add_argument("--sim-config", help="simulation config JSON (default: bundled)")
        sp.add_argument("--train-config", help="training config JSON (default: bundled)")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("train", help="train a DQN (or tabular Q) agent")
    common(sp, "runs/train")
    sp.add_argument("--agent", choices=("dqn", "qtable"), default="dqn")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise", type=float, default=0.0, help="observation noise sigma during training")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="run controllers over a scenario set")
    common(sp, "runs/eval")
    sp.add_argument("--scenarios", required=True, help="suite name (uvls960, brake220:50) or JSON file")
    sp.add_argument("--controller", action="append", required=True,
                    help="name=kind[:checkpoint][,key=value]; kinds noop|always|dqn|qtable|relay|mpc")
    sp.add_argument("--parallelism", type=int, default=1)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--trajectories", action="store_true", help="write per-run trajectory CSVs")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="materialize a scenario suite (and its FIDVR-positive subset)")
    common(sp, "runs/sweep")
    sp.add_argument("--scenarios")
    sp.add_argument("--parallelism", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="reward-difference report between two controllers")
    sp.add_argument("--records", required=True)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--bin-width", type=float, default=bench.HIST_BIN_WIDTH)
    sp.add_argument("--out", default="runs/report")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("serve", help="environment bridge over stdio or TCP")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--stdio", action="store_true", help="serve on stdin/stdout (default)")
    g.add_argument("--port", type=int)
    sp.add_argument("--host", default="127.0.0.1")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (bench.StructuralError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
