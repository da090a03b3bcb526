"""Config-to-dataset glue and the paired cross-domain comparison.

The comparison trains the full model and a no-anchor-transform ablation
from the same seed, evaluates both on held-out classes under the
shifted rendering domain, and scores per-run paired wins plus the gap
between run means.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

from promptseg.config import RunConfig, config_hash
from promptseg.episodes import DomainSpec, EvalReport, evaluate, generate_dataset
from promptseg.model import SegModel
from promptseg.training import run_training


def _domain_spec(invert, noise, texture_freq, blur, palette_seed) -> DomainSpec:
    return DomainSpec(invert=invert, noise_sigma=noise, texture_freq=texture_freq,
                      blur_radius=blur, palette_seed=palette_seed)


def train_dataset(cfg: RunConfig):
    d = cfg.data
    spec = _domain_spec(d.invert, d.noise, d.texture_freq, d.blur, d.palette_seed)
    return generate_dataset(spec, d.train_classes, d.samples_per_class, d.image_size)


def eval_dataset(cfg: RunConfig, domain: str):
    """Held-out classes rendered either like the training data (source)
    or under the shifted rendering settings from the eval section."""
    d, e = cfg.data, cfg.eval
    if domain == "shifted":
        spec = _domain_spec(e.invert, e.noise, e.texture_freq, e.blur, e.palette_seed)
    else:
        spec = _domain_spec(d.invert, d.noise, d.texture_freq, d.blur, d.palette_seed)
    return generate_dataset(spec, d.eval_classes, d.samples_per_class, d.image_size)


@dataclass
class ComparisonResult:
    full: EvalReport
    ablated: EvalReport
    wins: int                # runs where the full model scores higher
    total_runs: int
    mean_delta: float        # full mean mIoU - ablated mean mIoU

    def table(self) -> str:
        lines = ["paired cross-domain comparison",
                 f"config_hash(full): {self.full.header.get('config_hash', '?')}",
                 f"config_hash(ablated): {self.ablated.header.get('config_hash', '?')}",
                 f"train seed: {self.full.header.get('train_seed', '?')}",
                 "",
                 "run  full-mIoU  ablated-mIoU  delta  winner"]
        for i, (fr, ar) in enumerate(zip(self.full.runs, self.ablated.runs)):
            delta = fr.miou - ar.miou
            winner = "full" if delta > 0 else ("ablated" if delta < 0 else "tie")
            lines.append(f"{i:<4d} {fr.miou:9.4f}  {ar.miou:12.4f}  {delta:+.4f}  {winner}")
        lines += ["",
                  f"wins: {self.wins}/{self.total_runs}",
                  f"mean mIoU: full {self.full.mean_miou:.4f}  "
                  f"ablated {self.ablated.mean_miou:.4f}  "
                  f"delta {self.mean_delta:+.4f}"]
        return "\n".join(lines)

    def kv(self) -> str:
        lines = [f"full_config_hash={self.full.header.get('config_hash', '?')}",
                 f"ablated_config_hash={self.ablated.header.get('config_hash', '?')}",
                 f"train_seed={self.full.header.get('train_seed', '?')}",
                 f"runs={self.total_runs}",
                 f"wins={self.wins}",
                 f"mean_delta={self.mean_delta!r}",
                 f"full_mean_miou={self.full.mean_miou!r}",
                 f"ablated_mean_miou={self.ablated.mean_miou!r}"]
        for i, (fr, ar) in enumerate(zip(self.full.runs, self.ablated.runs)):
            lines.append(f"run{i}_full={fr.miou!r}")
            lines.append(f"run{i}_ablated={ar.miou!r}")
        return "\n".join(lines) + "\n"


def _train_and_eval(cfg: RunConfig, runs: int, episodes: int, log=None) -> EvalReport:
    model = SegModel(cfg)
    dataset = train_dataset(cfg)
    interval = max(1, cfg.train.steps // 8)

    def progress(step, loss):
        if log is not None and (step % interval == 0 or step == cfg.train.steps - 1):
            log(f"  step {step:>5d}  loss {loss:.4f}")

    run_training(model, dataset, cfg.train.steps, log_fn=progress)
    header = {"config_hash": config_hash(cfg), "train_seed": cfg.train.seed}
    return evaluate(model.predict, eval_dataset(cfg, "shifted"),
                    runs=runs, episodes_per_run=episodes, seed=cfg.eval.seed,
                    shots=cfg.train.shots, aggregation=cfg.eval.aggregation,
                    header=header)


def paired_cross_domain(base: RunConfig, steps: int | None = None,
                        runs: int | None = None, episodes: int | None = None,
                        log=None) -> ComparisonResult:
    full_cfg = copy.deepcopy(base)
    if steps is not None:
        full_cfg.train.steps = steps
    ablated_cfg = copy.deepcopy(full_cfg)
    ablated_cfg.dpat.enabled = False
    runs = runs if runs is not None else base.eval.runs
    episodes = episodes if episodes is not None else base.eval.episodes_per_run

    if log is not None:
        log(f"training full model ({full_cfg.train.steps} steps)")
    full = _train_and_eval(full_cfg, runs, episodes, log)
    if log is not None:
        log(f"training no-anchor ablation ({ablated_cfg.train.steps} steps)")
    ablated = _train_and_eval(ablated_cfg, runs, episodes, log)

    wins = sum(int(fr.miou > ar.miou)
               for fr, ar in zip(full.runs, ablated.runs))
    return ComparisonResult(full, ablated, wins, runs,
                            full.mean_miou - ablated.mean_miou)
