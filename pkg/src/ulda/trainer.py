"""Episodic training: one Adam step per pretext episode."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import DEFAULT_ALPHA_ADD, DEFAULT_ALPHA_SUB, resolve_preset
from .autodiff import NonFiniteError, Tape, adam_step, backward, read_tensors, write_tensors, zero_grad
from .episodes import EpisodeConfig, episode_seed, sample_episode
from .evaluator import EVAL_QUERY, evaluate
from .model import ProtoNet, episode_forward

log = logging.getLogger(__name__)

PAPER_EPOCHS = 60
PAPER_LR_FACTORS = ((20, 0.06), (40, 0.012), (50, 0.0024))
LR_MODES = ("replace", "compound")
RUNLOG_COLUMNS = ("epoch", "train_acc", "loss_few", "loss_self", "lr", "seconds", "eval_acc")


class TrainingAborted(RuntimeError):
    """Raised when an episode produces a non-finite loss."""

    def __init__(self, message, epoch, episode, seed):
        super().__init__(message)
        self.epoch = epoch
        self.episode = episode
        self.seed = seed


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``lr_factors`` maps epoch thresholds to learning-rate multipliers.
    When left as ``None`` the 60-epoch schedule (20, 40, 50) is scaled to
    ``epochs``, so short runs keep the same shape of decay.
    """

    epochs: int = PAPER_EPOCHS
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    initial_lr: float = 1e-3
    lr_factors: tuple | None = None
    lr_mode: str = "replace"
    gamma: float = 1.0
    seed: int = 0
    aug_support: str = "AA+TIMsub"
    aug_query: str = "R+TA+TIMadd"
    alpha_sub: float = DEFAULT_ALPHA_SUB
    alpha_add: float = DEFAULT_ALPHA_ADD
    filters: int = 64
    eq5_literal: bool = False
    eval_episodes: int = 100
    eval_n_way: int = 5
    eval_k_shot: int = 1
    eval_m_query: int = EVAL_QUERY
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.lr_mode not in LR_MODES:
            raise ValueError(f"lr_mode must be one of {LR_MODES}, got {self.lr_mode!r}")
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and non-negative, got {self.gamma}")
        if self.lr_factors is not None:
            object.__setattr__(self, "lr_factors", tuple((int(e), float(f)) for e, f in self.lr_factors))
            epochs = [e for e, _ in self.lr_factors]
            if any(b <= a for a, b in zip(epochs, epochs[1:])):
                raise ValueError(f"lr factor epochs must be strictly increasing, got {epochs}")
            if epochs and (epochs[0] < 1 or epochs[-1] >= self.epochs):
                raise ValueError(f"lr factor epochs must lie in [1, {self.epochs}), got {epochs}")

    @property
    def episodes_per_epoch(self):
        return self.episode.episodes_per_epoch

    def schedule(self):
        """The effective ``((epoch, factor), ...)`` learning-rate schedule."""
        if self.lr_factors is not None:
            return self.lr_factors
        scaled = {}
        for e, f in PAPER_LR_FACTORS:
            at = round(e * self.epochs / PAPER_EPOCHS)
            if 1 <= at < self.epochs:
                scaled[at] = f  # a later factor wins a shared threshold
        return tuple(sorted(scaled.items()))

    def operator_sets(self, image_size):
        return (
            resolve_preset(self.aug_support, image_size, self.alpha_sub, self.alpha_add),
            resolve_preset(self.aug_query, image_size, self.alpha_sub, self.alpha_add),
        )


def lr_at(epoch, cfg):
    """Learning rate in effect during ``epoch`` (0-based)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} is outside [0, {cfg.epochs})")
    factor = 1.0
    for threshold, f in cfg.schedule():
        if threshold <= epoch:
            factor = factor * f if cfg.lr_mode == "compound" else f
    return cfg.initial_lr * factor


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    loss_few: float
    loss_self: float
    lr: float
    seconds: float
    eval_acc: float | None = None


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_acc), repr(r.loss_few), repr(r.loss_self), repr(r.lr),
                        repr(r.seconds), "" if r.eval_acc is None else repr(r.eval_acc)])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(EpochRecord(
                    int(row["epoch"]), float(row["train_acc"]), float(row["loss_few"]), float(row["loss_self"]),
                    float(row["lr"]), float(row["seconds"]), float(row["eval_acc"]) if row["eval_acc"] else None,
                ))
        return out


# --- checkpoints ---------------------------------------------------------

def _bn_states(model):
    return [(f"backbone.{i}.bn", blk[3]) for i, blk in enumerate(model.backbone.blocks)]


def save_checkpoint(model, path, epoch=-1, best_eval=-1.0):
    """Parameters, Adam state, batchnorm statistics and model metadata."""
    tensors = {}
    for name, p in model.parameters().items():
        tensors[name] = p.data
        tensors[name + "#adam_m"] = p.adam_m
        tensors[name + "#adam_v"] = p.adam_v
        tensors[name + "#step"] = np.array([p.step_count])
    for prefix, st in _bn_states(model):
        tensors[prefix + ".running_mean"] = st.running_mean
        tensors[prefix + ".running_var"] = st.running_var
    tensors["meta.input_shape"] = np.array(model.in_shape)
    tensors["meta.filters"] = np.array([model.backbone.filters])
    tensors["meta.gamma"] = np.array([model.gamma])
    tensors["meta.eq5_literal"] = np.array([float(model.eq5_literal)])
    tensors["meta.epoch"] = np.array([epoch])
    tensors["meta.best_eval"] = np.array([best_eval])
    write_tensors(path, tensors)


def load_checkpoint(path):
    """Rebuild a :class:`ProtoNet` from :func:`save_checkpoint` output.

    Returns ``(model, meta)`` where ``meta`` holds ``epoch`` and ``best_eval``.
    """
    t = read_tensors(path)
    try:
        shape = tuple(int(v) for v in t["meta.input_shape"])
        model = ProtoNet(shape, int(t["meta.filters"][0]), gamma=float(t["meta.gamma"][0]),
                         eq5_literal=bool(t["meta.eq5_literal"][0]))
        for name, p in model.parameters().items():
            if t[name].shape != p.data.shape:
                raise ValueError(f"checkpoint {path}: tensor {name} has shape {t[name].shape}, model expects {p.data.shape}")
            p.data[...] = t[name]
            p.adam_m[...] = t[name + "#adam_m"]
            p.adam_v[...] = t[name + "#adam_v"]
            p.step_count = int(t[name + "#step"][0])
        for prefix, st in _bn_states(model):
            st.running_mean[...] = t[prefix + ".running_mean"]
            st.running_var[...] = t[prefix + ".running_var"]
    except KeyError as exc:
        raise ValueError(f"checkpoint {path}: missing tensor {exc.args[0]}") from None
    meta = {"epoch": int(t["meta.epoch"][0]), "best_eval": float(t["meta.best_eval"][0])}
    return model, meta


# --- training ------------------------------------------------------------

def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed), int(epoch), 0x545241]).generate_state(1, np.uint64)[0] >> 1)


def eval_seed(seed):
    return int(np.random.SeedSequence([int(seed), 0x56414C]).generate_state(1, np.uint32)[0])


def train_step(model, episode, lr):
    """Forward, backward and one Adam update. Returns ``(l_few, l_self, acc)``."""
    params = list(model.parameters().values())
    zero_grad(params)
    with Tape():
        total, l_few, l_self, acc = episode_forward(model, episode)
        backward(total)
    adam_step(params, lr)
    return l_few.item(), l_self.item(), acc


def build_model(cfg, in_shape):
    return ProtoNet(in_shape, cfg.filters, gamma=cfg.gamma, eq5_literal=cfg.eq5_literal, seed=cfg.seed)


def train(pool, cfg, eval_set=None, out_dir=None, model=None, start_epoch=0, end_epoch=None):
    """Train on ``pool`` and return ``(model, RunLog)``.

    Epochs ``start_epoch`` up to ``end_epoch`` (default ``cfg.epochs``) run;
    stopping early leaves the schedule untouched, which is how a run is
    split for resumption.

    With ``out_dir`` set, ``last.bin`` and ``runlog.csv`` are written at the
    end of every epoch and ``best.bin`` whenever held-out accuracy improves.
    Passing a ``model`` restored from ``last.bin`` with ``start_epoch`` one
    past its epoch resumes the run exactly where it stopped.
    """
    size = pool.image_shape[-1]
    a_s, a_q = cfg.operator_sets(size)
    if model is None:
        model = build_model(cfg, pool.image_shape)
    model.train()
    runlog = RunLog()
    best = -1.0
    if start_epoch and out_dir:
        if os.path.exists(os.path.join(out_dir, "runlog.csv")):
            runlog.records = [r for r in RunLog.read(os.path.join(out_dir, "runlog.csv")).records if r.epoch < start_epoch]
        best = max((r.eval_acc for r in runlog.records if r.eval_acc is not None), default=-1.0)

    use_eval = eval_set is not None and cfg.eval_episodes > 0
    for epoch in range(start_epoch, cfg.epochs if end_epoch is None else min(end_epoch, cfg.epochs)):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        es = epoch_seed(cfg.seed, epoch)
        sums = np.zeros(3)
        for z in range(cfg.episodes_per_epoch):
            ep = sample_episode(pool, cfg.episode, a_s, a_q, episode_seed(es, z))
            try:
                l_few, l_self, acc = train_step(model, ep, lr)
            except NonFiniteError as exc:
                msg = f"non-finite loss at epoch {epoch} episode {z} (episode seed {ep.seed}): {exc}"
                log.error(msg)
                raise TrainingAborted(msg, epoch, z, ep.seed) from exc
            sums += (acc, l_few, l_self)
        n = max(cfg.episodes_per_epoch, 1)
        eval_acc = None
        if use_eval:
            report = evaluate(model, eval_set, cfg.eval_n_way, cfg.eval_k_shot, cfg.eval_m_query,
                              T=cfg.eval_episodes, seed=eval_seed(cfg.seed))
            eval_acc = report.mean_accuracy
            model.train()
        elapsed = time.perf_counter() - t0
        rec = EpochRecord(epoch, float(sums[0] / n), float(sums[1] / n), float(sums[2] / n), float(lr),
                          float(elapsed) if cfg.record_wall_clock else 0.0, eval_acc)
        runlog.append(rec)
        log.info("epoch %d: train_acc %.4f loss_few %.4f loss_self %.4f lr %.3g eval %s (%.1fs)",
                 epoch, rec.train_acc, rec.loss_few, rec.loss_self, lr,
                 "-" if eval_acc is None else f"{eval_acc:.4f}", elapsed)
        if eval_acc is not None and eval_acc > best:
            best = eval_acc
            if out_dir:
                save_checkpoint(model, os.path.join(out_dir, "best.bin"), epoch, best)
        if out_dir:
            save_checkpoint(model, os.path.join(out_dir, "last.bin"), epoch, best)
            runlog.write(os.path.join(out_dir, "runlog.csv"))
    return model, runlog


def with_overrides(cfg, **changes):
    """Copy of ``cfg`` with fields replaced; ``n_way`` etc. reach the episode config."""
    ep_keys = {"n_way", "k_shot", "m_query", "episodes_per_epoch"}
    ep_changes = {k: changes.pop(k) for k in list(changes) if k in ep_keys}
    if ep_changes:
        changes["episode"] = replace(changes.get("episode", cfg.episode), **ep_changes)
    return replace(cfg, **changes)
