"""Training and evaluation runs with on-disk artifacts (config echo, metrics, checkpoints, PGMs)."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .agent import SPACAgent, Trainer
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    model_shapes,
    restore_agent,
    restore_trainer,
    save_checkpoint,
    shape_diff,
    trainer_state,
)
from .data import make_pairs
from .io import load_idx, write_pgm
from .metrics import MetricsLog, MetricsRow
from .substrate import set_deterministic
from .warp import field_magnitude, grid_sample_bilinear, ncc_local

log = logging.getLogger(__name__)

SUMMARY_STEPS = (1, 10, 20)


class RunError(RuntimeError):
    """A run could not start or had to stop."""


class TrainingDiverged(RunError):
    pass


def build_pairs(cfg: config_mod.RunConfig, split: str, count: int | None = None):
    spec = cfg.dataset_spec()
    if count is None:
        count = cfg.train_count if split == "train" else cfg.eval_count
    bases = None
    if cfg.source == "idx":
        if not cfg.idx_path:
            raise RunError("source=idx needs idx_path")
        bases = load_idx(cfg.idx_path)
        if not bases:
            raise RunError(f"{cfg.idx_path} holds no images")
    elif cfg.source != "synthetic":
        raise RunError(f"unknown data source {cfg.source!r}")
    return make_pairs(spec, split, count, bases=bases)


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _prepare_dir(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RunError(f"output directory {out} is not writable: {exc}") from None


def checkpoint_path(out: Path, step: int) -> Path:
    return out / "checkpoints" / f"step_{step:07d}.spck"


def save_trainer(trainer: Trainer, cfg: config_mod.RunConfig, path: Path, extra: dict | None = None) -> None:
    meta_extra = {"run": asdict(cfg)}
    meta_extra.update(extra or {})
    tensors, meta = trainer_state(trainer, meta_extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, tensors, meta)


def _finite(report) -> bool:
    return all(math.isfinite(v) for v in (report.j_q, report.j_kappa, report.j_reg, report.alpha_loss))


def train_run(cfg: config_mod.RunConfig, resume: str | os.PathLike | None = None) -> Path:
    """Run the collect/update loop until ``cfg.steps`` global steps; returns the output directory."""
    out = cfg.output_dir()
    _prepare_dir(out)
    if cfg.deterministic:
        set_deterministic()
    with _Lock(out):
        (out / "config.txt").write_text(cfg.to_text())
        pairs = build_pairs(cfg, "train")
        trainer = Trainer(cfg.train_config(), pairs)
        if resume is not None:
            tensors, meta = load_checkpoint(resume)
            restore_trainer(trainer, tensors, meta)
            log.info("resumed from %s at step %d", resume, trainer.global_step)
            if (out / "eval_metrics.csv").exists():
                MetricsLog(out / "eval_metrics.csv", truncate_after_step=trainer.global_step).close()
        else:
            save_trainer(trainer, cfg, checkpoint_path(out, 0))
        if trainer.global_step >= cfg.steps:
            return out

        eval_pairs = build_pairs(cfg, "eval", min(cfg.eval_count, 10)) if cfg.eval_every > 0 else []
        t0 = time.time()
        with MetricsLog(out / "metrics.csv", truncate_after_step=trainer.global_step) as metrics:
            while trainer.global_step < cfg.steps:
                rec = trainer.step()
                ep = trainer.episode
                r = rec.report
                if not _finite(r):
                    dump = out / "nan_dump.spck"
                    save_trainer(
                        trainer, cfg, dump, {"losses": asdict(r), "offending_batch": trainer.agent.last_batch}
                    )
                    raise TrainingDiverged(
                        f"non-finite loss at step {rec.global_step}: {asdict(r)}; state dumped to {dump}"
                    )
                ncc = float(_state_ncc(ep, trainer.agent.config.ncc_window))
                metrics.write(
                    MetricsRow(
                        cfg.run_id, rec.global_step, ep.tag, rec.episode_step, rec.dice, rec.reward, ncc,
                        r.j_q, r.j_kappa, r.j_reg, r.alpha, round(time.time() - t0, 3),
                    )
                )
                if cfg.checkpoint_every > 0 and rec.global_step % cfg.checkpoint_every == 0:
                    metrics.flush()
                    save_trainer(trainer, cfg, checkpoint_path(out, rec.global_step))
                    _field_pgm(out, rec.global_step, ep)
                if cfg.eval_every > 0 and rec.global_step % cfg.eval_every == 0:
                    _periodic_eval(trainer.agent, cfg, eval_pairs, rec.global_step, out / "eval_metrics.csv")
                if rec.global_step % 1000 == 0:
                    metrics.flush()
                    log.info("step %d dice %.3f j_reg %.4f alpha %.4f", rec.global_step, rec.dice, r.j_reg, r.alpha)
        if cfg.checkpoint_every <= 0 or trainer.global_step % cfg.checkpoint_every:
            save_trainer(trainer, cfg, checkpoint_path(out, trainer.global_step))
    return out


def _state_ncc(ep, window):
    with torch.no_grad():
        return ncc_local(ep.fixed, grid_sample_bilinear(ep.moving, ep.omega), window)


def _field_pgm(out: Path, step: int, ep) -> None:
    d = out / "fields"
    d.mkdir(exist_ok=True)
    write_pgm(d / f"step_{step:07d}_magnitude.pgm", field_magnitude(ep.omega), normalize=True)


def _periodic_eval(agent, cfg, pairs, step, path):
    with MetricsLog(path) as metrics:
        for i, (fixed, moving) in enumerate(pairs):
            res = agent.evaluate_policy(fixed, moving, cfg.horizon)
            for t, (d, n) in enumerate(zip(res.dice, res.ncc)):
                reward = d - res.dice[t - 1] if t else 0.0
                metrics.write(MetricsRow(cfg.run_id, step, i, t, d, reward, n, alpha=agent.temperature.alpha))


# --------------------------------------------------------------------- evaluation


def load_agent(path: str | os.PathLike) -> tuple[SPACAgent, config_mod.RunConfig, dict]:
    """Networks and temperature from a checkpoint; the replay pool is left empty."""
    tensors, meta = load_checkpoint(path)
    cfg = config_mod.build(meta["run"]) if "run" in meta else config_mod.build(meta["config"])
    agent = SPACAgent(cfg.train_config())
    expected = model_shapes(agent)
    found = {n: tuple(t.shape) for n, t in tensors.items() if n.split(".")[0] in _MODEL_PREFIXES}
    problems = shape_diff(expected, found)
    if problems:
        raise CheckpointError(f"{path}: checkpoint does not match the model:\n  " + "\n  ".join(problems))
    restore_agent(agent, tensors, {**meta, "pool": {**meta["pool"], "rewards": []}})
    return agent, cfg, meta


_MODEL_PREFIXES = ("planner", "actor", "critic", "target", "temperature")


@dataclass
class EvalSummary:
    t: int
    mean: float
    std: float
    n: int


def evaluate_agent(
    agent: SPACAgent,
    pairs,
    horizon: int,
    run_id: str = "eval",
    global_step: int = 0,
    labels=None,
) -> tuple[list[MetricsRow], np.ndarray, list]:
    """Deterministic evaluation of every pair. Returns (rows, dice matrix pairs x (horizon+1), results)."""
    if horizon < 1:
        raise RunError(f"horizon must be >= 1, got {horizon}")
    rows, curves, results = [], [], []
    for i, (fixed, moving) in enumerate(pairs):
        lab = labels[i] if labels is not None else None
        res = agent.evaluate_policy(fixed, moving, horizon, labels=lab)
        results.append(res)
        curves.append(res.dice)
        for t, (d, n) in enumerate(zip(res.dice, res.ncc)):
            reward = d - res.dice[t - 1] if t else 0.0
            rows.append(MetricsRow(run_id, global_step, i, t, d, reward, n, alpha=agent.temperature.alpha))
    return rows, np.asarray(curves, dtype=np.float64), results


def summarize(curves: np.ndarray, steps=SUMMARY_STEPS) -> list[EvalSummary]:
    out = []
    for t in steps:
        if t < curves.shape[1]:
            col = curves[:, t]
            out.append(EvalSummary(t, float(col.mean()), float(col.std()), int(col.size)))
    return out


def eval_run(
    checkpoint: str | os.PathLike,
    horizon: int | None = None,
    count: int | None = None,
    out_dir: str | os.PathLike | None = None,
    pgm: int = 0,
    split: str = "eval",
) -> tuple[list[EvalSummary], np.ndarray]:
    agent, cfg, meta = load_agent(checkpoint)
    horizon = cfg.eval_horizon if horizon is None else horizon
    if horizon < 1:
        raise RunError(f"horizon must be >= 1, got {horizon}")
    pairs = build_pairs(cfg, split, count)
    step = meta.get("global_step", 0)
    rows, curves, results = evaluate_agent(agent, pairs, horizon, cfg.run_id, step)
    summary = summarize(curves)
    out = Path(out_dir) if out_dir else Path(checkpoint).resolve().parent.parent / f"eval_step_{step:07d}"
    _prepare_dir(out)
    eval_csv = out / "eval_metrics.csv"
    eval_csv.unlink(missing_ok=True)
    with MetricsLog(eval_csv) as metrics:
        for row in rows:
            metrics.write(row)
    with open(out / "eval_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_dice", "std_dice", "n"])
        for s in summary:
            w.writerow([s.t, repr(s.mean), repr(s.std), s.n])
    with open(out / "eval_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_dice", "std_dice", "mean_ncc"])
        nccs = np.asarray([r.ncc for r in results])
        for t in range(curves.shape[1]):
            w.writerow([t, repr(float(curves[:, t].mean())), repr(float(curves[:, t].std())), repr(float(nccs[:, t].mean()))])
    for i in range(min(pgm, len(pairs))):
        fixed, moving = pairs[i]
        pdir = out / "pgm" / f"pair_{i:04d}"
        pdir.mkdir(parents=True, exist_ok=True)
        write_pgm(pdir / "fixed.pgm", fixed)
        write_pgm(pdir / "moving.pgm", moving)
        for t, field in enumerate(results[i].fields):
            if t == 0:
                continue
            write_pgm(pdir / f"warped_t{t:02d}.pgm", grid_sample_bilinear(moving, field))
            write_pgm(pdir / f"field_t{t:02d}.pgm", field_magnitude(field), normalize=True)
    return summary, curves
