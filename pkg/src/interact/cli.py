"""Command-line entry point: ``interact <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import sim
from .config import ABLATIONS, ModelConfig, load_config, profile, save_config
from .dataio import (load_checkpoint, read_episode, save_checkpoint, write_episode)
from .errors import InteractError, UsageError
from .policy import EnsemblePolicy, InterACT, model_gradient_errors, predict_chunk, train

GRAD_TOLERANCE = 1e-4
CSV_HEADER = ("t", "arm", "layer", "head", "cls_mass")
VARIANTS = (("full", ()), ("no-cls", ("no-cls",)), ("no-cross", ("no-cross",)), ("no-sync", ("no-sync",)))


class CommandFailed(Exception):
    """Runtime failure that should end the command with exit code 1."""


# ---------------------------------------------------------------- argument types


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _ablation_list(text):
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise argparse.ArgumentTypeError(
            f"unknown ablation {', '.join(bad)}; valid names: {', '.join(ABLATIONS)}")
    return tuple(sorted(set(names)))


def _task(text):
    if text not in sim.TASKS:
        raise argparse.ArgumentTypeError(f"unknown task {text!r}; choose from {', '.join(sorted(sim.TASKS))}")
    return text


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="JSON config overriding the profile")
    shared.add_argument("--profile", choices=("paper", "desk"), default=None)
    shared.add_argument("--seed", type=_seed, default=None)
    shared.add_argument("--out", type=Path, default=None)
    shared.add_argument("--force", action="store_true", help="overwrite outputs, skip digest checks")

    parser = argparse.ArgumentParser(prog="interact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("gen-demos", parents=[shared], help="write scripted demonstration episodes")
    p.add_argument("--task", type=_task, required=True)
    p.add_argument("--num", type=_positive_int, default=50)
    p.add_argument("--noise", type=float, default=0.0)

    p = sub.add_parser("train", parents=[shared], help="train a policy on a demo directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ablate", type=_ablation_list, default=())
    p.add_argument("--steps", type=_positive_int, default=None)

    p = sub.add_parser("eval", parents=[shared], help="roll out a checkpoint and report stage success")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--task", type=_task, required=True)
    p.add_argument("--episodes", type=_positive_int, default=50)

    p = sub.add_parser("ablate", parents=[shared], help="train and evaluate every ablation variant")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--task", type=_task, required=True)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.add_argument("--episodes", type=_positive_int, default=50)

    p = sub.add_parser("attn-trace", parents=[shared], help="CLS attention mass per decoder layer and head")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--episode", type=Path, required=True)

    p = sub.add_parser("grad-check", parents=[shared], help="finite-difference check of the full model")
    p.add_argument("--coords", type=_positive_int, default=8, help="coordinates probed per tensor")
    return parser


# ---------------------------------------------------------------- helpers


def resolve_config(args) -> ModelConfig:
    if args.config is not None:
        cfg = load_config(args.config, args.profile)
    else:
        cfg = profile(args.profile or "desk")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def prepare_out(path: Path | None, default: str, force: bool) -> Path:
    out = Path(path or default)
    if out.exists() and not out.is_dir():
        raise CommandFailed(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandFailed(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_dataset(data: Path):
    files = sorted(data.glob("*.iact")) if data.is_dir() else []
    if not files:
        raise CommandFailed(f"no episode files (*.iact) found in {data}")
    return [read_episode(f) for f in files]


def check_task_fit(cfg: ModelConfig, task: str) -> None:
    if cfg.joints_per_arm != sim.J_PER_ARM:
        raise CommandFailed(
            f"checkpoint expects {cfg.joints_per_arm} joints per arm, task {task} has {sim.J_PER_ARM}")
    if cfg.use_visual and (cfg.image_size != sim.IMAGE_SIZE or cfg.image_channels != 1):
        raise CommandFailed(
            f"checkpoint expects {cfg.image_size}x{cfg.image_size}x{cfg.image_channels} images, "
            f"task renders {sim.IMAGE_SIZE}x{sim.IMAGE_SIZE}x1")


def restore_model(ckpt_path: Path, expected: ModelConfig | None, force: bool):
    ckpt = load_checkpoint(ckpt_path, expected, force)
    if ckpt.stats is None:
        raise CommandFailed(f"{ckpt_path} carries no normalization statistics")
    model = InterACT(ckpt.config)
    model.load_arrays(ckpt.params)
    model.eval()
    return ckpt, model


def stage_table(rows: dict, stages) -> str:
    """Plain-text table: one row per variant, one percentage column per stage."""
    name_w = max([len("variant")] + [len(n) for n in rows])
    col_w = [max(len(s), 6) for s in stages]
    lines = ["  ".join(["variant".ljust(name_w)] + [s.rjust(w) for s, w in zip(stages, col_w)])]
    for name, rates in rows.items():
        lines.append("  ".join([name.ljust(name_w)] + [f"{rates[s]:.1f}".rjust(w) for s, w in zip(stages, col_w)]))
    return "\n".join(lines)


def eval_seeds(base: int, n: int):
    return list(range(base, base + n))


# ---------------------------------------------------------------- subcommands


def cmd_gen_demos(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(args.out, f"demos_{args.task}", args.force)
    base = cfg.seed if args.seed is None else args.seed
    seeds = [base + i for i in range(args.num)]
    files = []
    for i, seed in enumerate(seeds):
        ep = sim.generate_demo(args.task, seed, args.noise)
        name = f"episode_{i:04d}.iact"
        write_episode(ep, out / name)
        files.append({"file": name, "seed": seed, "success": ep.meta["success"]})
    write_json(out / "manifest.json", {"task": args.task, "num": args.num, "noise": args.noise,
                                       "seeds": seeds, "config_digest": f"{cfg.digest():016x}",
                                       "episodes": files})
    save_config(cfg, out / "config.json")
    print(f"wrote {args.num} {args.task} episodes to {out}")
    return 0


def _train_one(cfg, episodes, out: Path, label: str = ""):
    t0 = time.perf_counter()
    last = {}

    def progress(rec):
        last.update(rec)
        if rec["step"] % max(cfg.steps // 10, 1) == 0:
            print(f"{label}step {rec['step']}/{cfg.steps}  l1 {rec['l1']:.4f}  kl {rec['kl']:.4f}", flush=True)

    result = train(episodes, cfg, log_path=out / "metrics.jsonl",
                   checkpoint_dir=out, progress=progress)
    save_checkpoint(out / "model.ckpt", cfg, result.model.state_arrays(), result.stats)
    save_config(cfg, out / "config.json")
    print(f"{label}trained {cfg.steps} steps in {time.perf_counter() - t0:.1f}s", flush=True)
    return result


def cmd_train(args) -> int:
    cfg = resolve_config(args).with_ablations(args.ablate)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    episodes = load_dataset(args.data)
    out = prepare_out(args.out, "run", args.force)
    _train_one(cfg, episodes, out)
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _evaluate(model, stats, task, episodes, seed):
    policy = EnsemblePolicy(model, stats)
    return sim.evaluate(policy, task, episodes, seeds=eval_seeds(seed, episodes))


def cmd_eval(args) -> int:
    expected = resolve_config(args) if args.config is not None else None
    ckpt, model = restore_model(args.ckpt, expected, args.force)
    check_task_fit(ckpt.config, args.task)
    seed = 0 if args.seed is None else args.seed
    out = prepare_out(args.out, "eval", args.force)
    report = _evaluate(model, ckpt.stats, args.task, args.episodes, seed)
    write_json(out / "results.json", report.to_dict(seed))
    save_config(ckpt.config, out / "config.json")
    print(stage_table({"policy": report.rates}, sim.get_task(args.task).stages))
    return 0


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    check_task_fit(base, args.task)
    episodes = load_dataset(args.data)
    out = prepare_out(args.out, f"ablate_{args.task}", args.force)
    seed = base.seed
    rows, results = {}, {}
    for name, flags in VARIANTS:
        cfg = base.with_ablations(flags)
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        result = _train_one(cfg, episodes, vdir, label=f"[{name}] ")
        report = _evaluate(result.model, result.stats, args.task, args.episodes, seed)
        write_json(vdir / "results.json", report.to_dict(seed))
        rows[name] = report.rates
        results[name] = report.to_dict(seed)
    stages = sim.get_task(args.task).stages
    table = stage_table(rows, stages)
    (out / "ablation.txt").write_text(table + "\n")
    write_json(out / "ablation.json", {"task": args.task, "episodes": args.episodes, "seed": seed,
                                       "variants": {n: r["stages"] for n, r in results.items()}})
    save_config(base, out / "config.json")
    print(table)
    return 0


def trace_rows(model: InterACT, stats, episode):
    """Replay recorded observations; yield (t, arm, layer, head, cls_mass) rows."""
    cfg = model.cfg
    J = cfg.joints_per_arm
    for t in range(episode.length):
        q = episode.qpos[t]
        obs = {"qpos1": q[:J], "qpos2": q[J:], "image": episode.image[t] if cfg.use_visual else None}
        predict_chunk(obs, model, stats)
        mass = model.last_trace.cls_mass()[0]        # (2, L, heads)
        for arm in range(2):
            for layer in range(cfg.l_dec):
                for head in range(cfg.n_heads):
                    yield t, arm + 1, layer, head, float(mass[arm, layer, head])
                yield t, arm + 1, layer, -1, float(mass[arm, layer].mean())


def cmd_attn_trace(args) -> int:
    expected = resolve_config(args) if args.config is not None else None
    ckpt, model = restore_model(args.ckpt, expected, args.force)
    if ckpt.config.no_cls or sum(ckpt.config.cls_counts) == 0:
        raise CommandFailed("checkpoint was trained without CLS tokens; "
                            "the decoder memory has no CLS span to trace")
    episode = read_episode(args.episode)
    if episode.joints_per_arm != ckpt.config.joints_per_arm:
        raise CommandFailed(f"episode has {episode.joints_per_arm} joints per arm, "
                            f"checkpoint expects {ckpt.config.joints_per_arm}")
    out = Path(args.out or "trace.csv")
    if out.exists() and not args.force:
        raise CommandFailed(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t, arm, layer, head, value in trace_rows(model, ckpt.stats, episode):
            writer.writerow((t, arm, layer, head, repr(value)))
            n += 1
    save_config(ckpt.config, out.parent / "config.json")
    print(f"wrote {n} rows to {out}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args)
    t0 = time.perf_counter()
    errors = model_gradient_errors(cfg, max_coords=args.coords)
    groups = {}
    for name, err in errors.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    for group in sorted(groups):
        print(f"{group:<10} max relative error {groups[group]:.3e}")
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    print(f"checked {len(errors)} parameter tensors in {time.perf_counter() - t0:.1f}s; "
          f"max relative error {worst:.3e} ({worst_name})")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_json(args.out / "grad_check.json", {"tolerance": GRAD_TOLERANCE, "errors": errors})
        save_config(cfg, args.out / "config.json")
    if not worst < GRAD_TOLERANCE:
        failing = sorted(n for n, e in errors.items() if not e < GRAD_TOLERANCE)
        print(f"FAIL: gradient mismatch in {', '.join(failing)}", file=sys.stderr)
        return 1
    print("PASS")
    return 0


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attn-trace": cmd_attn_trace,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (CommandFailed, InteractError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
