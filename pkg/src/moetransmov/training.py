"""Sliding windows, length-bucketed batching, the Adam loop with early stopping, and ablation variants."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataio import UNLABELED, Poi, TrajectorySession
from .model import ModelConfig, MoETransMov, NextPoiModel
from .numerics import adam_step, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-4
    max_epochs: int = 100
    patience: int = 3
    seq_len: int = 50
    seed: int = 0
    monitor: str = "val"  # or "train"

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1 or self.seq_len < 1:
            raise ValueError(f"invalid training config: {self}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.monitor not in ("val", "train"):
            raise ValueError("monitor must be 'val' or 'train'")


@dataclass(frozen=True)
class TrainingWindow:
    input: tuple[int, ...]
    target_poi: int
    target_cat: int = 0
    familiarity: str = UNLABELED
    user: int = -1


def make_windows(
    sessions: Iterable[TrajectorySession], seq_len: int, pois: Sequence[Poi] | None = None
) -> list[TrainingWindow]:
    """One window per position ``t >= 1``: the up-to-``seq_len`` POIs before ``t`` predict ``poi_seq[t]``."""
    out = []
    for s in sessions:
        seq = s.poi_seq
        for t in range(1, len(seq)):
            target = seq[t]
            cat = pois[target].category if pois is not None else 0
            out.append(TrainingWindow(tuple(seq[max(0, t - seq_len):t]), target, cat,
                                      s.familiarity_seq[t], s.user))
    return out


def batch_arrays(windows: Sequence[TrainingWindow]):
    ids = np.array([w.input for w in windows], dtype=np.int64)
    return ids, np.array([w.target_poi for w in windows]), np.array([w.target_cat for w in windows])


def length_batches(windows: Sequence[TrainingWindow], batch_size: int, rng=None) -> list[list[int]]:
    """Index batches of equal input length.

    With ``rng`` the window order and the batch order are shuffled; without it
    batches come in a fixed (length, position) order. Every index appears once.
    """
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(len(windows[i].input), []).append(int(i))
    batches = []
    for length in sorted(buckets):
        idx = buckets[length]
        batches.extend(idx[j:j + batch_size] for j in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def mean_loss(model: NextPoiModel, windows: Sequence[TrainingWindow], batch_size: int = 256) -> float:
    """Mean combined head loss over ``windows`` without touching gradients."""
    if not windows:
        return float("nan")
    total = 0.0
    with no_grad():
        for idx in length_batches(windows, batch_size):
            ids, tp, tc = batch_arrays([windows[i] for i in idx])
            total += model.loss(ids, tp, tc).item() * len(idx)
    return total / len(windows)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_epoch: int
    best_loss: float
    stopped_early: bool
    best_state: dict = field(repr=False, default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.log)


def should_stop(history: Sequence[float], patience: int) -> bool:
    """True once the monitored loss rose on each of the last ``patience`` epochs."""
    if len(history) <= patience:
        return False
    tail = history[-(patience + 1):]
    return all(b > a for a, b in zip(tail[:-1], tail[1:]))


def train(
    model: NextPoiModel,
    train_windows: Sequence[TrainingWindow],
    val_windows: Sequence[TrainingWindow],
    cfg: TrainConfig,
    val_loss_fn: Callable[[int], float] | None = None,
    on_epoch: Callable[[EpochRecord], bool | None] | None = None,
) -> TrainResult:
    """Adam on the combined head loss with early stopping; leaves ``model`` at its best epoch.

    ``val_loss_fn(epoch)`` replaces the measured validation loss (for probing
    the stopping rule). ``on_epoch`` sees each record and may return True to
    end training after that epoch.
    """
    if not train_windows:
        raise ValueError("training needs at least one window")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    history: list[float] = []
    records: list[EpochRecord] = []
    best_epoch, best_loss, best_state = 0, math.inf, model.state_dict()
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        running = 0.0
        for b, idx in enumerate(length_batches(train_windows, cfg.batch_size, rng)):
            ids, tp, tc = batch_arrays([train_windows[i] for i in idx])
            loss = model.loss(ids, tp, tc)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b} (lr={cfg.lr})")
            loss.backward()
            adam_step(params, cfg.lr)
            running += value * len(idx)
        train_loss = running / len(train_windows)
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(epoch))
        elif val_windows:
            val_loss = mean_loss(model, val_windows)
        else:
            val_loss = float("nan")
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"mean train loss {train_loss} at epoch {epoch}")
        record = EpochRecord(epoch, train_loss, val_loss)
        records.append(record)
        monitored = train_loss if cfg.monitor == "train" or not math.isfinite(val_loss) else val_loss
        history.append(monitored)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if monitored < best_loss:
            best_epoch, best_loss, best_state = epoch, monitored, model.state_dict()
        if should_stop(history, cfg.patience):
            stopped = True
            break
        if on_epoch is not None and on_epoch(record):
            break

    model.load_state_dict(best_state)
    return TrainResult(records, best_epoch, best_loss, stopped, best_state)


def format_loss_log(records: Sequence[EpochRecord]) -> str:
    return "".join(f"{r.epoch}\t{float(r.train_loss)!r}\t{float(r.val_loss)!r}\n" for r in records)


def write_loss_log(path, records: Sequence[EpochRecord]) -> None:
    Path(path).write_text(format_loss_log(records), encoding="utf-8")


def read_loss_log(path) -> list[EpochRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        e, tr, va = line.split("\t")
        out.append(EpochRecord(int(e), float(tr), float(va)))
    return out


# ------------------------------------------------------------------ variants

VARIANTS = {
    "full": dict(expert_kinds=("lstm", "transformer"), use_gate=True, fusion_layers=1),
    "no_moe": dict(expert_kinds=("transformer",), use_gate=False, fusion_layers=1),
    "no_transformer": dict(expert_kinds=("lstm", "transformer"), use_gate=True, fusion_layers=0),
    "two_lstm": dict(expert_kinds=("lstm", "lstm"), use_gate=True, fusion_layers=1),
    "two_transformer": dict(expert_kinds=("transformer", "transformer"), use_gate=True, fusion_layers=1),
}


def variant_config(name: str) -> dict:
    """Config fields that define an ablation variant."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")
    return dict(VARIANTS[name])


def build_variant(name: str, base: ModelConfig) -> MoETransMov:
    return MoETransMov(replace(base, **variant_config(name)))
