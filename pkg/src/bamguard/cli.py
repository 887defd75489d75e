"""Command-line entry point: ``bamguard {train,eval,dump-maps,count-params}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as runcfg
from .attack import AttackConfig, AttackError, pgd_attack
from .bam import attention_polarization
from .env import PixelCatchEnv, write_pgm
from .evaluate import REGIMES, evaluate_reward
from .metrics import compute_metrics, control_records, dumps_json, reports_to_csv
from .policy import (ArchitectureConfig, CheckpointError, ConfigError, PolicyNetwork,
                     count_parameters, load_checkpoint, save_checkpoint)
from .ppo import AdvTraining, TrainingDiverged, train
from .recovery import RecoveryConfig, recover_policy

log = logging.getLogger("bamguard")

EXIT_USAGE = 2
EXIT_RUNTIME = 3
DUMP_KINDS = ("obs", "clean_act", "attacked_act", "attention", "cleaned")


class UsageFailure(Exception):
    pass


def parse_pairs(pairs, section):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{section}: expected KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def adv_from_pairs(pairs):
    values = parse_pairs(pairs, "--adv")
    unknown = set(values) - {"every_k", "eps", "iterations", "step_size"}
    if unknown:
        raise ConfigError(f"--adv: unknown keys {sorted(unknown)}")
    try:
        attack = AttackConfig(epsilon=float(values.get("eps", 0.1)),
                              iterations=int(values.get("iterations", 10)),
                              step_size=float(values["step_size"]) if "step_size" in values else None)
        return AdvTraining(attack=attack, every_k=int(values.get("every_k", 10)))
    except ValueError as exc:
        raise ConfigError(f"--adv: {exc}") from None


def resolve(args):
    cfg = runcfg.load(args.config) if args.config else runcfg.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    return cfg


def prepare_outdir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = resolve(args)
    if args.arch is not None:
        cfg.architecture = replace(cfg.architecture, bam_index=2 if args.arch == "bam" else None)
    if args.adv is not None:
        cfg.training = runcfg.override(cfg.training, adv_training=adv_from_pairs(args.adv))
    cfg.training = runcfg.override(cfg.training, total_steps=args.steps, learning_rate=args.lr,
                                   seed=cfg.seed)
    cfg.architecture.layer_shapes()
    out = prepare_outdir(cfg)
    regime = ("bam" if cfg.architecture.has_bam else "baseline") + ("+adv" if cfg.training.adv_training else "")
    log.info("training regime %s for %d steps", regime, cfg.training.total_steps)
    ckpt = out / "checkpoint.barl"
    try:
        net, history = train(cfg.architecture, cfg.training, log_path=out / "train_log.csv",
                             env_kwargs=cfg.env)
    except TrainingDiverged as exc:
        net = PolicyNetwork(cfg.architecture, dtype=np.float32, zero=True)
        net.load_state_dict(exc.last_good_state)
        save_checkpoint(net, ckpt)
        print(f"training diverged: {exc}; last good checkpoint at {ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(net, ckpt)
    last = history[-1]["mean_episode_reward"] if history else float("nan")
    print(f"{regime}: {len(history)} updates, last mean episode reward {last:.3f}, checkpoint {ckpt}")
    return 0


def _load_net(path, expected_arch=None):
    net = load_checkpoint(path)
    if expected_arch is not None and net.config.has_bam != (expected_arch == "bam"):
        raise CheckpointError(f"{path}: checkpoint architecture does not match --arch {expected_arch}")
    return net


def cmd_eval(args):
    cfg = resolve(args)
    if args.eps is not None:
        cfg.evaluation = runcfg.override(cfg.evaluation, epsilons=tuple(args.eps))
    if args.regimes is not None:
        cfg.evaluation = runcfg.override(cfg.evaluation, regimes=tuple(args.regimes))
    if args.episodes is not None:
        cfg.evaluation = runcfg.override(cfg.evaluation, episodes=args.episodes)
    if args.reentry is not None:
        cfg.recovery = RecoveryConfig(args.reentry)
    if args.iterations is not None:
        cfg.attack = runcfg.override(cfg.attack, iterations=args.iterations)
    ev = cfg.evaluation
    if not ev.epsilons:
        raise ConfigError("empty epsilon grid")
    if any(e < 0 for e in ev.epsilons):
        raise ConfigError("epsilons must be >= 0")
    bad = set(ev.regimes) - set(REGIMES)
    if bad or not ev.regimes:
        raise ConfigError(f"regimes must be a non-empty subset of {REGIMES}")
    if ev.episodes < 1:
        raise ConfigError("episodes must be >= 1")
    net = _load_net(args.checkpoint, args.arch)
    cfg.architecture = net.config
    if "attacked+recovery" in ev.regimes and not net.config.has_bam:
        raise ConfigError("attacked+recovery needs a checkpoint with a BAM layer")
    out = prepare_outdir(cfg)
    seeds = list(range(cfg.seed, cfg.seed + ev.episodes))
    common = dict(seeds=seeds, env_kwargs=cfg.env, workers=cfg.workers, recovery=cfg.recovery)
    clean = evaluate_reward(net, ev.episodes, "clean", **common) if "clean" in ev.regimes else None
    rows, reports = [], []
    for eps in ev.epsilons:
        attack = runcfg.override(cfg.attack, epsilon=float(eps))
        entry = {"epsilon": float(eps), "regimes": {}}
        for regime in ev.regimes:
            if regime == "clean":
                result, report = clean, None
            else:
                result = evaluate_reward(net, ev.episodes, regime, attack, collect=True, **common)
                recs = result.records if regime == "attacked+recovery" else control_records(result.records)
                report = compute_metrics(recs, epsilon=float(eps))
            summary = result.summary()
            rows.append((float(eps), regime, report, summary))
            entry["regimes"][regime] = {"reward": summary,
                                        "metrics": None if report is None else report.to_dict()}
            log.info("eps=%g %s reward %.3f", eps, regime, summary["mean"])
        reports.append(entry)
    (out / "metrics.csv").write_text(reports_to_csv(rows))
    doc = {"schema_version": 1, "checkpoint": str(args.checkpoint), "env_id": "PixelCatch",
           "episodes": ev.episodes, "seeds": seeds, "reentry": cfg.recovery.reentry,
           "reports": reports}
    (out / "metrics.json").write_text(dumps_json(doc))
    print(reports_to_csv(rows), end="")
    return 0


def normalize_image(img):
    """Min-max scale to [0, 1]; constant images map to all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if not hi > lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def sample_states(net, n, seed, env_kwargs, stride=7, warmup=5):
    env = PixelCatchEnv(**env_kwargs)
    obs = env.reset(seed)
    states, t = [], 0
    while len(states) < n:
        if t >= warmup and (t - warmup) % stride == 0:
            states.append(obs)
        obs, _, done = env.step(int(net.act(obs)[0]))
        t += 1
        if done:
            seed += 1
            obs = env.reset(seed)
    return np.stack(states)


def cmd_dump_maps(args):
    cfg = resolve(args)
    if args.states < 1:
        raise ConfigError("--states must be >= 1")
    attack = runcfg.override(cfg.attack, epsilon=args.eps)
    net = _load_net(args.checkpoint)
    if not net.config.has_bam:
        raise ConfigError("dump-maps needs a checkpoint with a BAM layer")
    cfg.architecture = net.config
    if args.source == "env":
        states = sample_states(net, args.states, cfg.seed, cfg.env)
    elif args.source == "zeros":
        states = np.zeros((args.states,) + net.config.input_shape)
    else:
        try:
            states = np.load(args.source)
        except OSError as exc:
            raise UsageFailure(f"cannot read observations from {args.source}: {exc}") from None
        states = states.reshape((-1,) + net.config.input_shape)[:args.states]
    out = prepare_outdir(cfg)
    adv = pgd_attack(net, states, attack).s_adv
    l = net.bam_index
    clean_act = net.forward_prefix(states, 1, l - 1).data
    _, tap = recover_policy(net, adv, cfg.recovery)
    written = []
    for i in range(len(states)):
        panels = {
            "obs": states[i, -1],
            "clean_act": clean_act[i].mean(axis=0),
            "attacked_act": tap.f_pre[i].mean(axis=0),
            "attention": tap.f_bam[i].mean(axis=0),
            "cleaned": tap.f_rec[i].mean(axis=0),
        }
        for kind in DUMP_KINDS:
            written.append(write_pgm(out / f"state{i}_{kind}.pgm", normalize_image(panels[kind])))
    print(f"wrote {len(written)} images to {out} "
          f"(attention polarization {attention_polarization(tap.f_bam):.3f})")
    return 0


def cmd_count_params(args):
    if args.config:
        arch = runcfg.load(args.config).architecture
    else:
        arch = ArchitectureConfig.nature_lite(bam=args.arch != "baseline")
    print(count_parameters(arch))
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(prog="bamguard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if workers:
            p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="train a policy (baseline / bam, optionally adversarial)")
    common(p)
    p.add_argument("--arch", choices=("baseline", "bam"))
    p.add_argument("--adv", nargs="*", metavar="KEY=VALUE",
                   help="adversarial training, e.g. --adv every_k=10 eps=0.1")
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="reward and recovery metrics over an epsilon grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", choices=("baseline", "bam"), help="expected architecture")
    p.add_argument("--eps", type=float, nargs="*")
    p.add_argument("--regimes", nargs="+", choices=REGIMES)
    p.add_argument("--episodes", type=int)
    p.add_argument("--iterations", type=int, help="PGD iterations")
    p.add_argument("--reentry", choices=("after_bam", "at_bam"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-maps", help="write activation / attention / recovered maps as PGM")
    common(p, workers=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--source", default="env", help="'env', 'zeros' or a .npy file of observations")
    p.set_defaults(func=cmd_dump_maps)

    p = sub.add_parser("count-params", help="print the parameter count of an architecture")
    p.add_argument("--arch", choices=("baseline", "bam"), default="bam")
    p.add_argument("--config")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, UsageFailure, ValueError) as exc:
        print(f"bamguard {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttackError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"bamguard {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
