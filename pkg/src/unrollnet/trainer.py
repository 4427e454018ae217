"""SGD training loop, dataset loading and evaluation for unrolled graphs.

The loop trains the tied weight groups of an unrolled graph with
momentum SGD under a stepwise learning-rate schedule, records
normalization statistics per (site, t), and reports top-1 test error
after every epoch. Evaluation unrolls the same description to an
arbitrary readout horizon, so a model trained at one t can be scored
at another once statistics for that horizon have been collected.
"""

from __future__ import annotations

import csv
import glob
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .graph import GraphSpec, IOSchedule, SharingSpec
from .store import ParamStore, forced_time_shared_stats
from .unroll import backward, forward, unroll

Array = np.ndarray

RECORD_BYTES = 3073  # label byte + 32*32 of R, G, B

# (first epoch, last epoch, learning rate); scaled when epochs differ
DEFAULT_SCHEDULE = ((1, 40, 0.01), (41, 50, 0.001), (51, 60, 0.0001))


@dataclass(frozen=True)
class Dataset:
    images: Array  # float32, (N, 3, 32, 32), channel means removed
    labels: Array  # int64, (N,)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_schedule: tuple = DEFAULT_SCHEDULE
    momentum: float = 0.9
    augment: bool = True
    seed: int = 0
    subset_train: int | None = None
    subset_test: int | None = None
    weight_decay: float = 0.0
    bn_time_specific: bool = True
    bn_ema_decay: float = 0.9
    readout_time: int | None = None  # evaluation horizon override

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.bn_ema_decay < 1.0:
            raise ValueError("bn_ema_decay must lie in (0, 1)")
        resolve_schedule(self.lr_schedule, self.epochs)  # raise early

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        """Build from a parsed train section; overrides win."""
        kw = dict(d)
        kw.update(overrides)
        if "lr_schedule" in kw and kw["lr_schedule"] is not None:
            kw["lr_schedule"] = tuple(
                (int(a), int(b), float(lr)) for a, b, lr in kw["lr_schedule"]
            )
        return cls(**kw)

    def schedule(self) -> tuple:
        return resolve_schedule(self.lr_schedule, self.epochs)

    def lr_for_epoch(self, epoch: int) -> float:
        for a, b, lr in self.schedule():
            if a <= epoch <= b:
                return lr
        raise ValueError(f"epoch {epoch} outside schedule")


def resolve_schedule(schedule, epochs: int) -> tuple:
    """Validate a stepwise schedule; rescale it when its span != epochs.

    The segments must partition 1..L contiguously for some L. When
    L == epochs they are used as given; otherwise every boundary is
    scaled by epochs/L (empty segments are dropped), so the default
    60-epoch recipe shrinks sensibly to desk-scale epoch counts.
    """
    segs = [(int(a), int(b), float(lr)) for a, b, lr in schedule]
    if not segs:
        raise ValueError("lr_schedule is empty")
    segs.sort()
    prev_end = 0
    for a, b, lr in segs:
        if a != prev_end + 1:
            raise ValueError(
                f"lr_schedule segments must be contiguous from epoch 1; "
                f"segment starts at {a} after {prev_end}"
            )
        if b < a:
            raise ValueError(f"lr_schedule segment ({a}, {b}) is empty")
        if lr < 0:
            raise ValueError("learning rates must be >= 0")
        prev_end = b
    span = prev_end
    if span == epochs:
        return tuple(segs)
    scaled = []
    start = 1
    for i, (a, b, lr) in enumerate(segs):
        end = epochs if i == len(segs) - 1 else round(b * epochs / span)
        if end >= start:
            scaled.append((start, end, lr))
            start = end + 1
    scaled[-1] = (scaled[-1][0], epochs, scaled[-1][2])
    return tuple(scaled)


# -- data ---------------------------------------------------------------------


def _read_batch(path: str) -> tuple[Array, Array]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD_BYTES != 0:
        raise IOError(
            f"{path}: truncated record at byte "
            f"{len(raw) - len(raw) % RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IOError(f"{path}: label {labels[bad]} out of range at record {bad}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir: str, subset_train: int | None = None,
                 subset_test: int | None = None,
                 dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Read binary batch files; scale to [0, 1]; remove train channel means.

    Training records come from data_batch_*.bin (sorted), test records
    from test_batch.bin. Subsets keep the first n records. The test set
    is centered with the training set's means.
    """
    train_files = sorted(glob.glob(os.path.join(data_dir, "data_batch_*.bin")))
    if not train_files:
        raise IOError(f"no data_batch_*.bin files in {data_dir!r}")
    test_file = os.path.join(data_dir, "test_batch.bin")
    if not os.path.exists(test_file):
        raise IOError(f"missing test batch {test_file!r}")

    parts = [_read_batch(p) for p in train_files]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_batch(test_file)
    if subset_train is not None:
        train_x, train_y = train_x[:subset_train], train_y[:subset_train]
    if subset_test is not None:
        test_x, test_y = test_x[:subset_test], test_y[:subset_test]

    train_x = train_x.astype(dtype) / 255.0
    test_x = test_x.astype(dtype) / 255.0
    means = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    train_x = train_x - means[:, None, None]
    test_x = test_x - means[:, None, None]
    return Dataset(train_x, train_y), Dataset(test_x, test_y)


def augment_batch(images: Array, rng: np.random.Generator) -> Array:
    """Zero-pad by 4, crop back to the original size, flip left-right at p=.5."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(images)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- training and evaluation --------------------------------------------------


def _readout_loss(logits: dict[int, Array], labels: Array):
    """Sum of cross-entropies over readout times, with per-time grads."""
    total = 0.0
    dl = {}
    for t_r, lg in logits.items():
        loss, grad = ops.softmax_cross_entropy(lg, labels)
        total += loss
        dl[t_r] = grad
    return total, dl


def train(g: GraphSpec, s: SharingSpec, io: IOSchedule, T: int,
          cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          log=None) -> tuple[ParamStore, list[dict]]:
    """Momentum-SGD training of the unrolled graph at horizon T.

    Returns the trained store and one metrics row per epoch:
    {epoch, lr, train_loss, test_error, wall_seconds}. test_error is
    NaN when no test set is given. Raises RuntimeError naming the
    epoch and batch when the loss stops being finite.
    """
    u = unroll(g, s, io, T)
    store = ParamStore.init(s, u, seed=cfg.seed)
    required = u.live_groups()
    t_eval = cfg.readout_time if cfg.readout_time is not None else max(io.readout_times)
    n = len(train_set)

    metrics: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.monotonic()
        lr = cfg.lr_for_epoch(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        loss_sum = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x = train_set.images[idx]
            y = train_set.labels[idx]
            if cfg.augment:
                x = augment_batch(x, rng)
            logits, cache = forward(u, store, x, mode="train", record="ema",
                                    ema_decay=cfg.bn_ema_decay)
            loss, dl = _readout_loss(logits, y)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}, batch {bi}")
            grads = backward(u, store, cache, dl)
            store.sgd_momentum_step(grads, lr, momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay,
                                    required=required)
            loss_sum += loss * len(idx)

        test_error = float("nan")
        if test_set is not None:
            eval_store = store if cfg.bn_time_specific else forced_time_shared_stats(store)
            test_error = evaluate(eval_store, g, s, io, t_eval, test_set)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / n,
            "test_error": test_error,
            "wall_seconds": time.monotonic() - start,
        }
        metrics.append(row)
        if log is not None:
            log(row)
    return store, metrics


def evaluate(store: ParamStore, g: GraphSpec, s: SharingSpec, io: IOSchedule,
             t: int, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 error rate reading out at time t. Leaves the store untouched.

    Raises MissingStats when no normalization statistics exist for
    horizon t; collect_bn_stats provides them for horizons the model
    was not trained at.
    """
    u = unroll(g, s, replace(io, readout_times=frozenset({t})), t)
    wrong = 0
    for lo in range(0, len(data), batch_size):
        x = data.images[lo : lo + batch_size]
        y = data.labels[lo : lo + batch_size]
        logits, _ = forward(u, store, x, mode="eval")
        wrong += int((np.argmax(logits[t], axis=1) != y).sum())
    return wrong / len(data)


def collect_bn_stats(store: ParamStore, g: GraphSpec, s: SharingSpec,
                     io: IOSchedule, t: int, images: Array,
                     batch_size: int = 256) -> int:
    """Exact pooled normalization statistics for readout horizon t.

    Runs the training images through the graph unrolled to t in train
    mode, pooling every batch's moments, then commits the pooled values
    into the store. This is what makes evaluation at a horizon the
    model never saw during training possible. Returns the number of
    (site, t) slots written.
    """
    u = unroll(g, s, replace(io, readout_times=frozenset({t})), t)
    for lo in range(0, len(images), batch_size):
        forward(u, store, images[lo : lo + batch_size], mode="train",
                record="pooled")
    return store.commit_pooled()


def write_metrics_csv(path: str, metrics: list[dict]) -> None:
    fields = ["epoch", "lr", "train_loss", "test_error", "wall_seconds"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in metrics:
            w.writerow({k: row[k] for k in fields})
