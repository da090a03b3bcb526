"""Command-line entry points: train, eval, ablate, inspect.

Exit codes: 0 success, 2 invalid config, 3 training aborted on a
non-finite loss, 4 checkpoint/config hash mismatch, 5 binary file
format error. Every artifact written embeds the config hash and the
seed it was produced under.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import os
import sys

import numpy as np

from promptseg.config import (ConfigError, config_hash, dump_config, load_config,
                              model_hash, validate)
from promptseg.encoder import FEATURE_MAGIC, level_checksums, load_features
from promptseg.episodes import evaluate, sample_episode, write_pgm, write_ppm
from promptseg.experiment import eval_dataset, train_dataset
from promptseg.ioutil import FormatError
from promptseg.model import SegModel
from promptseg.training import (CHECKPOINT_MAGIC, HashMismatchError,
                                TrainingAborted, checkpoint_digest,
                                load_checkpoint, restore, run_training,
                                save_checkpoint)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_HASH = 4
EXIT_FORMAT = 5

ABLATION_AXES = ("components", "channels", "sparse-count", "ccs-mode")


def _stamp_lines(cfg) -> list[str]:
    return [f"config_hash: {config_hash(cfg)}",
            f"model_hash: {model_hash(cfg)}",
            f"seed: {cfg.train.seed}"]


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    validate(cfg)
    os.makedirs(args.out, exist_ok=True)

    model = SegModel(cfg)
    dataset = train_dataset(cfg)
    start = 0
    if args.resume is not None:
        start = restore(model, args.resume, mode="train")
        print(f"resumed from {args.resume} at step {start}")

    log_lines = _stamp_lines(cfg) + [f"params: {model.param_count()}", ""]
    interval = max(1, (cfg.train.steps - start) // 10)
    every = args.checkpoint_every

    def log(step, loss):
        log_lines.append(f"{step}\t{loss:.6f}")
        if step % interval == 0 or step == cfg.train.steps - 1:
            print(f"step {step:>6d}  loss {loss:.4f}")
        done = step + 1
        if every and done % every == 0 and done < cfg.train.steps:
            snap = os.path.join(args.out, f"checkpoint_step{done}.apck")
            save_checkpoint(snap, model, done)

    ckpt_path = os.path.join(args.out, "checkpoint.apck")
    try:
        run_training(model, dataset, cfg.train.steps, start_step=start, log_fn=log)
    except TrainingAborted:
        _write_text(os.path.join(args.out, "train_log.txt"), "\n".join(log_lines))
        raise
    save_checkpoint(ckpt_path, model, cfg.train.steps)
    _write_text(os.path.join(args.out, "train_log.txt"), "\n".join(log_lines))
    _write_text(os.path.join(args.out, "config_used.txt"),
                "\n".join(_stamp_lines(cfg)) + "\n\n" + dump_config(cfg))
    print(f"checkpoint: {ckpt_path}")
    print(f"checkpoint sha256: {checkpoint_digest(ckpt_path)}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def _render_episodes(model, dataset, out_dir, count, seed, shots) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng([seed, 0])
    for i in range(count):
        ep = sample_episode(dataset, shots, rng)
        pred = model.predict(ep)
        write_ppm(os.path.join(out_dir, f"ep{i:03d}_query.ppm"), ep.query.image)
        write_pgm(os.path.join(out_dir, f"ep{i:03d}_gt.pgm"), ep.query.mask)
        write_pgm(os.path.join(out_dir, f"ep{i:03d}_pred.pgm"), pred.astype(float))


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.eval.seed = args.seed
    validate(cfg)
    runs = args.runs if args.runs is not None else cfg.eval.runs
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes_per_run
    os.makedirs(args.out, exist_ok=True)

    model = SegModel(cfg)
    step = restore(model, args.checkpoint, mode="eval")
    dataset = eval_dataset(cfg, args.domain)
    header = {"config_hash": config_hash(cfg), "model_hash": model_hash(cfg),
              "seed": cfg.eval.seed, "train_seed": cfg.train.seed,
              "checkpoint": os.path.basename(str(args.checkpoint)),
              "checkpoint_sha256": checkpoint_digest(args.checkpoint),
              "trained_steps": step}
    report = evaluate(model.predict, dataset, runs=runs, episodes_per_run=episodes,
                      seed=cfg.eval.seed, shots=cfg.train.shots,
                      aggregation=cfg.eval.aggregation, header=header)
    txt = os.path.join(args.out, "eval_report.txt")
    _write_text(txt, report.to_text())
    _write_text(os.path.join(args.out, "eval_report.kv"), report.to_kv())
    if args.render:
        _render_episodes(model, dataset, os.path.join(args.out, "renders"),
                         args.render, cfg.eval.seed, cfg.train.shots)
    print(report.to_text())
    print(f"\nreport: {txt}")
    return EXIT_OK


# -- ablate ------------------------------------------------------------------


def _axis_variants(axis: str, base):
    """Variant configs for one ablation axis, all sharing seeds and data."""
    out = []

    def derive(name, mutate):
        cfg = copy.deepcopy(base)
        mutate(cfg)
        validate(cfg)
        out.append((name, cfg))

    if axis == "components":
        def off_both(c):
            c.dpat.enabled = False
            c.mpg.enabled = False
        def mpg_only(c):
            c.dpat.enabled = False
            c.mpg.enabled = True
        def full(c):
            c.dpat.enabled = True
            c.mpg.enabled = True
        derive("decoder-only", off_both)
        derive("+prompt-gen", mpg_only)
        derive("+prompt-gen+anchor", full)
    elif axis == "channels":
        for c_r in (16, 32, 64):
            derive(f"reduced={c_r}", lambda c, v=c_r: setattr(c.mpg, "reduced_channels", v))
    elif axis == "sparse-count":
        for k in (1, 4, 8):
            derive(f"sparse={k}", lambda c, v=k: setattr(c.mpg, "sparse_count", v))
    elif axis == "ccs-mode":
        for mode in ("none", "ccs", "pm-map"):
            derive(f"mode={mode}", lambda c, v=mode: setattr(c.dpat, "ccs_mode", v))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return out


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base.train.seed = args.seed
    if args.steps is not None:
        base.train.steps = args.steps
    validate(base)
    runs = args.runs if args.runs is not None else base.eval.runs
    episodes = args.episodes if args.episodes is not None else base.eval.episodes_per_run
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for name, cfg in _axis_variants(args.axis, base):
        print(f"[{args.axis}] {name}: training {cfg.train.steps} steps")
        model = SegModel(cfg)
        dataset = train_dataset(cfg)
        losses = run_training(model, dataset, cfg.train.steps)
        report = evaluate(model.predict, eval_dataset(cfg, args.domain),
                          runs=runs, episodes_per_run=episodes,
                          seed=cfg.eval.seed, shots=cfg.train.shots,
                          aggregation=cfg.eval.aggregation)
        rows.append((name, cfg, model.param_count(),
                     losses[-1][1] if losses else float("nan"), report))
        print(f"[{args.axis}] {name}: mIoU {report.mean_miou:.4f} "
              f"+/- {report.std_miou:.4f}")

    head = [f"ablation axis: {args.axis}",
            f"base config_hash: {config_hash(base)}",
            f"train seed: {base.train.seed}   eval seed: {base.eval.seed}",
            f"steps: {base.train.steps}   runs: {runs}   episodes/run: {episodes}",
            f"domain: {args.domain}", ""]
    width = max(len(r[0]) for r in rows)
    head.append(f"{'variant':<{width}}  {'mIoU':>7}  {'std':>7}  {'params':>8}  final-loss")
    for name, _, count, final_loss, report in rows:
        head.append(f"{name:<{width}}  {report.mean_miou:7.4f}  {report.std_miou:7.4f}"
                    f"  {count:8d}  {final_loss:.4f}")
    table = "\n".join(head)

    kv = [f"axis={args.axis}", f"base_config_hash={config_hash(base)}",
          f"train_seed={base.train.seed}", f"eval_seed={base.eval.seed}",
          f"steps={base.train.steps}", f"runs={runs}", f"episodes_per_run={episodes}",
          f"domain={args.domain}", f"variants={len(rows)}"]
    for i, (name, cfg, count, final_loss, report) in enumerate(rows):
        kv += [f"variant{i}_name={name}",
               f"variant{i}_config_hash={config_hash(cfg)}",
               f"variant{i}_params={count}",
               f"variant{i}_final_loss={final_loss!r}",
               f"variant{i}_miou={report.mean_miou!r}",
               f"variant{i}_std={report.std_miou!r}"]
        for r, run in enumerate(report.runs):
            kv.append(f"variant{i}_run{r}_miou={run.miou!r}")

    stem = os.path.join(args.out, f"ablate_{args.axis}")
    _write_text(stem + ".txt", table)
    _write_text(stem + ".kv", "\n".join(kv))
    print("\n" + table)
    print(f"\ntable: {stem}.txt")
    return EXIT_OK


# -- inspect -----------------------------------------------------------------


def _file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == FEATURE_MAGIC:
        image_id, feats = load_features(args.path)
        print(f"feature file: {args.path}")
        print(f"image id: {image_id}")
        print(f"file sha256: {_file_sha256(args.path)}")
        for i, (f, ck) in enumerate(zip(feats.levels, level_checksums(feats)), start=1):
            c, h, w = f.shape
            print(f"level {i}: {c}x{h}x{w}  sha256 {ck}")
        return EXIT_OK
    if magic == CHECKPOINT_MAGIC:
        data = load_checkpoint(args.path)
        print(f"checkpoint: {args.path}")
        print(f"file sha256: {_file_sha256(args.path)}")
        print(f"step: {data.step}")
        print(f"config hash: {data.config_digest}")
        print(f"model hash: {data.model_digest}")
        total = 0
        print(f"{'parameter':<28} {'dtype':<8} {'shape':<16} count")
        for name, (arr, _, _, astep) in data.blobs.items():
            n = int(arr.size)
            total += n
            print(f"{name:<28} {str(arr.dtype):<8} {str(arr.shape):<16} {n}")
        print(f"total parameters: {total}")
        return EXIT_OK
    raise FormatError(f"unrecognized magic {magic!r} in {args.path}")


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptseg",
                                description="episodic few-shot segmentation runner")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", default=None, help="config file (defaults when omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--resume", default=None,
                   help="snapshot to continue from (same config, bit-exact)")
    t.add_argument("--checkpoint-every", type=int, default=None, metavar="N",
                   help="also write checkpoint_step{N}.apck snapshots")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out classes")
    e.add_argument("checkpoint")
    e.add_argument("--config", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--runs", type=int, default=None)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--domain", choices=("source", "shifted"), default="shifted")
    e.add_argument("--render", type=int, default=0, metavar="N",
                   help="write the first N episode renders")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and score variants along one axis")
    a.add_argument("--axis", choices=ABLATION_AXES, required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--runs", type=int, default=None)
    a.add_argument("--episodes", type=int, default=None)
    a.add_argument("--domain", choices=("source", "shifted"), default="shifted")
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("inspect", help="print header, shapes and checksums of a binary file")
    i.add_argument("path")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except HashMismatchError as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
