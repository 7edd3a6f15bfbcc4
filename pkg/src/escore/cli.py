"""Command-line front end for the whole pipeline.

Subcommands: gen-demos, train, sample, reward, rl, theory. Every run
writes a resolved-config JSON next to its outputs so reruns can be
audited; with --threads 1 (the default) rerunning a command with the
same config produces byte-identical files.

Exit codes: 0 success, 2 I/O failure, 3 bad configuration, 4 missing
upstream artifact, 5 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract reserves 2 for IO
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_CONFIG, message)


def _set_thread_env(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _ensure_outdir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot create output directory {path}: {e}")
    return path


def _write_resolved_config(args, outdir: str) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(os.path.join(outdir, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _need_file(path: str, what: str):
    if path is None or not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"missing {what}: {path}")
    return path


def _load_dataset(path: str):
    from escore.envs import DemoDataset
    _need_file(path, "demo dataset")
    try:
        return DemoDataset.load_csv(path)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {e}")


def _load_net(path: str):
    from escore.model import EnergyNet
    _need_file(path, "checkpoint")
    try:
        return EnergyNet.load(path)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {e}")


def _make_expert(kind: str, state_dim: int = 2, action_dim: int = 2):
    from escore.envs import gaussian_expert, mixture_expert
    if kind == "gaussian":
        return gaussian_expert(state_dim, action_dim)
    if kind == "mixture2":
        return mixture_expert(state_dim, action_dim)
    raise CliError(EXIT_CONFIG, f"unknown expert kind {kind!r}")


# ---------------------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    from escore.envs import (GoalMdp, box_state_sampler, generate_demos,
                             generate_mdp_demos)
    from escore.numerics import Rng
    if args.n < 2:
        raise CliError(EXIT_CONFIG, "need n >= 2 demonstrations (key: n)")
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    rng = Rng(args.seed)
    if args.expert == "mdp":
        ds = generate_mdp_demos(GoalMdp(), args.n, rng, jitter=args.jitter)
    else:
        expert = _make_expert(args.expert)
        ds = generate_demos(expert, args.n, box_state_sampler(), rng)
    demo_path = os.path.join(outdir, "demos.csv")
    ds.save_csv(demo_path)
    stats = {"schema_version": 1, "expert": args.expert, "n": len(ds),
             "seed": args.seed,
             "state_mean": ds.s_mean.tolist(), "state_std": ds.s_std.tolist(),
             "action_mean": ds.a_mean.tolist(), "action_std": ds.a_std.tolist()}
    with open(os.path.join(outdir, "stats.json"), "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(ds)} demos to {demo_path}")
    return 0


def cmd_train(args) -> int:
    from escore.model import EnergyNet, NetConfig
    from escore.numerics import Rng
    from escore.schedule import NoiseSchedule
    from escore.train import TrainConfig, TrainingDivergence, train
    ds = _load_dataset(args.demos)
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    try:
        cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                          warmup_steps=min(args.warmup, args.steps),
                          total_steps=args.steps, seed=args.seed)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e))
    net = EnergyNet(ds.actions.shape[1], ds.states.shape[1], NetConfig(),
                    Rng(args.seed))
    try:
        net, report = train(net, NoiseSchedule(), ds, cfg)
    except TrainingDivergence as e:
        raise CliError(EXIT_DIVERGED, f"training diverged: {e}")
    net.save(os.path.join(outdir, "checkpoint.bin"))
    report.save_csv(os.path.join(outdir, "train_log.csv"))
    print(f"final loss (100-step mean) {report.final_loss_ma():.6g}")
    return 0


def cmd_sample(args) -> int:
    from escore.numerics import Rng
    from escore.sample import OdeConfig, SamplerDivergence, sample_batch
    from escore.schedule import NoiseSchedule
    net = _load_net(args.checkpoint)
    ds = _load_dataset(args.demos)
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    n = min(args.n, len(ds))
    states = ds.states[:n]
    try:
        cfg = OdeConfig(steps=args.ode_steps)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e))
    try:
        results = sample_batch(net, NoiseSchedule(), states, cfg, Rng(args.seed))
    except SamplerDivergence as e:
        raise CliError(EXIT_DIVERGED, f"sampler diverged: {e}")
    path = os.path.join(outdir, "samples.csv")
    d_s, d_a = states.shape[1], net.action_dim
    with open(path, "w", newline="") as f:
        cols = ([f"s{i}" for i in range(d_s)] + [f"a{i}" for i in range(d_a)]
                + ["terminal_energy"])
        f.write("index," + ",".join(cols) + "\n")
        for i, (a, e) in enumerate(results):
            vals = list(states[i]) + list(a) + [e]
            f.write(f"{i}," + ",".join(f"{v:.17g}" for v in vals) + "\n")
    print(f"wrote {len(results)} samples to {path}")
    return 0


def cmd_reward(args) -> int:
    from escore.numerics import Rng
    from escore.reward import (RewardConfig, centered_reward, raw_reward,
                               reference_actions)
    net = _load_net(args.checkpoint)
    ds = _load_dataset(args.demos)
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    try:
        rcfg = RewardConfig(gamma=args.gamma, n_reference=args.n_reference)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e))
    refs = reference_actions(Rng(args.seed, stream=5), rcfg, net.action_dim)
    n = min(args.n, len(ds))
    path = os.path.join(outdir, "rewards.csv")
    with open(path, "w", newline="") as f:
        f.write("index,raw,centered\n")
        for i in range(n):
            s, a = ds.states[i], ds.actions[i]
            f.write(f"{i},{raw_reward(net, a, s, rcfg):.17g},"
                    f"{centered_reward(net, a, s, rcfg, refs):.17g}\n")
    print(f"wrote {n} rewards to {path}")
    return 0


def cmd_rl(args) -> int:
    from escore.envs import GoalMdp
    from escore.reward import RewardConfig
    from escore.sac import ARM_NAMES, RlDivergence, SacConfig, run_arm, save_curves_csv
    if args.mode not in ARM_NAMES:
        raise CliError(EXIT_CONFIG, f"unknown arm {args.mode!r} (key: mode)")
    net = dataset = None
    if args.mode in ("raw", "centered", "centered_sparse"):
        net = _load_net(args.checkpoint)
        dataset = _load_dataset(args.demos)
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    results = []
    for seed in range(args.seeds):
        try:
            results.append(run_arm(GoalMdp(), args.mode, args.steps, seed,
                                   net=net, dataset=dataset, cfg=SacConfig(),
                                   rcfg=RewardConfig()))
        except RlDivergence as e:
            raise CliError(EXIT_DIVERGED, f"rl diverged (seed {seed}): {e}")
    save_curves_csv(os.path.join(outdir, "curves.csv"), results)
    summary = {"schema_version": 1, "mode": args.mode,
               "steps_to_80pct": [r.steps_to_success() for r in results],
               "final_success": [r.final_success() for r in results]}
    with open(os.path.join(outdir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    print(f"arm {args.mode}: steps to 80% {summary['steps_to_80pct']}")
    return 0


def cmd_theory(args) -> int:
    from escore.theory import run_dimension_sweep, run_property_suite, save_report_json
    outdir = _ensure_outdir(args.out)
    _write_resolved_config(args, outdir)
    if args.suite == "sweep":
        report = run_dimension_sweep(seeds=range(args.seeds))
        save_report_json(os.path.join(outdir, "sweep.json"), report)
        matrix_path = os.path.join(outdir, "sweep.csv")
        with open(matrix_path, "w", newline="") as f:
            f.write("kind,d,median_risk\n")
            for kind, risks in report["median_risk"].items():
                for d, r in zip(report["d_values"], risks):
                    f.write(f"{kind},{d},{r:.17g}\n")
        ok = (report["conservative_wins_at_top_d"] >= 8
              and report["slope"]["unconstrained"] > report["slope"]["conservative"])
        print(f"sweep: wins {report['conservative_wins_at_top_d']}, "
              f"slopes {report['slope']}")
    else:
        from escore.envs import standardized_expert
        net = _load_net(args.checkpoint)
        ds = _load_dataset(args.demos)
        expert = standardized_expert(_make_expert(args.expert), ds)
        report = run_property_suite(net, expert, seed=args.seed)
        save_report_json(os.path.join(outdir, "property.json"), report)
        ok = report["passed"]
        print(f"property suite: {'pass' if ok else 'FAIL'}")
    if args.strict and not ok:
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="escore", description=__doc__,
               formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread cap (default 1 for bitwise reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="sample expert demonstrations")
    g.add_argument("--expert", default="gaussian",
                   choices=["gaussian", "mixture2", "mdp"])
    g.add_argument("--n", type=int, default=10_000,
                   help="pairs (or episodes for --expert mdp)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jitter", type=float, default=0.25)
    g.add_argument("--out", default="out/demos")
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="fit the energy model by denoising")
    t.add_argument("--demos", required=True)
    t.add_argument("--steps", type=int, default=20_000)
    t.add_argument("--warmup", type=int, default=500)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="out/train")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate actions by the reverse ODE")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--demos", required=True, help="provides evaluation states")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--ode-steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/samples")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reward", help="extract rewards from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--demos", required=True)
    r.add_argument("--n", type=int, default=100)
    r.add_argument("--gamma", type=float, default=1e-3)
    r.add_argument("--n-reference", type=int, default=16)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="out/reward")
    r.set_defaults(func=cmd_reward)

    rl = sub.add_parser("rl", help="train SAC on one reward arm")
    rl.add_argument("--mode", required=True)
    rl.add_argument("--steps", type=int, default=50_000)
    rl.add_argument("--seeds", type=int, default=5)
    rl.add_argument("--checkpoint")
    rl.add_argument("--demos")
    rl.add_argument("--out", default="out/rl")
    rl.set_defaults(func=cmd_rl)

    th = sub.add_parser("theory", help="generalization sweep / property checks")
    th.add_argument("--suite", default="property", choices=["sweep", "property"])
    th.add_argument("--seeds", type=int, default=10, help="sweep trials per cell")
    th.add_argument("--checkpoint")
    th.add_argument("--demos")
    th.add_argument("--expert", default="gaussian",
                    choices=["gaussian", "mixture2"])
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--strict", action="store_true",
                    help="nonzero exit if any check fails")
    th.add_argument("--out", default="out/theory")
    th.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_thread_env(args.threads)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
