"""Arena-disjoint K-fold splits and the SGD training loop."""

import csv
import json
import logging
import math
import os
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nx
from .data import DEFAULT_CROP_SIZE, apply_crop, sample_training_crop

log = logging.getLogger(__name__)


@dataclass
class FoldSpec:
    k: int
    assignment: dict          # scene_id -> fold index
    arena_folds: dict         # arena_id -> fold index

    def fold_scenes(self, scenes, fold):
        return [s for s in scenes if self.assignment[s.scene_id] == fold]

    def other_scenes(self, scenes, fold):
        return [s for s in scenes if self.assignment[s.scene_id] != fold]


def make_folds(scenes, k, seed):
    """Assign whole arenas to folds, largest arena first into the lightest fold."""
    counts = {}
    for s in scenes:
        counts[s.arena_id] = counts.get(s.arena_id, 0) + 1
    if len(counts) < k:
        raise ValueError(f"need at least K={k} distinct arenas, found {len(counts)}")
    arenas = sorted(counts)
    order = np.random.default_rng(seed).permutation(len(arenas))
    shuffled = [arenas[i] for i in order]
    # stable sort keeps the shuffled order among equally sized arenas
    shuffled.sort(key=lambda a: -counts[a])
    load = [0] * k
    arena_folds = {}
    for arena in shuffled:
        f = min(range(k), key=lambda i: (load[i], i))
        arena_folds[arena] = f
        load[f] += counts[arena]
    assignment = {s.scene_id: arena_folds[s.arena_id] for s in scenes}
    return FoldSpec(k, assignment, arena_folds)


def split_train_val(scenes, seed):
    """Shuffle and split 90/10 by count (validation gets ceil(10%))."""
    if len(scenes) < 10:
        raise ValueError(f"need at least 10 scenes to split train/validation, got {len(scenes)}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_val = math.ceil(0.1 * len(scenes))
    val = [scenes[i] for i in order[:n_val]]
    train = [scenes[i] for i in order[n_val:]]
    return train, val


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay_factor: float = 2.0
    decay_every: int = 40
    batch_size: int = 4
    epochs: int = 150
    seed: int = 0
    use_diff: bool = True
    crop_size: tuple = DEFAULT_CROP_SIZE
    workers: int = 1

    def __post_init__(self):
        self.crop_size = tuple(self.crop_size)
        for name in ("learning_rate", "decay_factor", "decay_every", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def lr_schedule(config, epoch):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.learning_rate / config.decay_factor ** (epoch // config.decay_every)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    best_epoch: int = -1


class TrainingDiverged(RuntimeError):
    pass


def _crop_batch(scenes, specs, crop_size, use_diff):
    pairs = [apply_crop(s, c, crop_size, use_diff) for s, c in zip(scenes, specs)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def _epoch_batches(scenes, config, epoch):
    rng = np.random.default_rng([config.seed, 1, epoch])
    order = rng.permutation(len(scenes))
    specs = [sample_training_crop(scenes[i], config.crop_size, rng) for i in order]
    n_batches = len(scenes) // config.batch_size
    for b in range(n_batches):
        sl = slice(b * config.batch_size, (b + 1) * config.batch_size)
        yield _crop_batch([scenes[i] for i in order[sl]], specs[sl], config.crop_size, config.use_diff)


def _prefetch(iterable, depth):
    """Produce items on a background thread through a bounded queue."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as err:  # re-raised in the consumer
            q.put(err)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def validation_set(scenes, config):
    """One frozen crop per validation scene."""
    rng = np.random.default_rng([config.seed, 2])
    specs = [sample_training_crop(s, config.crop_size, rng) for s in scenes]
    return _crop_batch(scenes, specs, config.crop_size, config.use_diff)


def mean_loss(weights, inputs, masks, batch_size):
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        x = inputs[start:start + batch_size]
        _, cache = mdl.forward(weights, x, training=True)
        total += nx.cross_entropy_pixel_mean(cache.probs, masks[start:start + batch_size]) * len(x)
    return total / len(inputs)


def sgd_step(weights, x, mask, lr):
    """One forward/backward/update; returns (new weights, batch loss before the update)."""
    _, cache = mdl.forward(weights, x, training=True)
    loss = nx.cross_entropy_pixel_mean(cache.probs, mask)
    grads = mdl.backward(weights, cache, nx.cross_entropy_backward(cache.probs, mask))
    return weights.updated(nx.sgd_update(weights.params, grads, lr)), loss


def train(scenes_train, scenes_val, net_config, config, initial=None, on_epoch=None):
    """SGD on fresh random crops each epoch; keeps the weights of the best validation epoch."""
    if not scenes_train or not scenes_val:
        raise ValueError("training and validation sets must be non-empty")
    if net_config.use_diff != config.use_diff:
        raise ValueError(
            f"input-channel mismatch: network has {net_config.input_channels} input channels, use_diff={config.use_diff}")
    if len(scenes_train) < config.batch_size:
        raise ValueError(f"{len(scenes_train)} training scenes cannot fill a batch of {config.batch_size}")
    weights = initial or mdl.build_network(net_config, config.seed)
    val_x, val_m = validation_set(scenes_val, config)
    history = TrainHistory()
    best = None
    best_loss = math.inf
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        batches = _epoch_batches(scenes_train, config, epoch)
        if config.workers > 1:
            batches = _prefetch(batches, depth=2 * config.workers)
        losses = []
        for b, (x, m) in enumerate(batches):
            weights, loss = sgd_step(weights, x, m, lr)
            if not math.isfinite(loss) or not all(np.isfinite(p).all() for p in weights.params.values()):
                raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {b} (loss={loss})")
            losses.append(loss)
        val = mean_loss(weights, val_x, val_m, config.batch_size)
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val)
        history.learning_rate.append(lr)
        if val < best_loss:
            best_loss = val
            best = weights
            history.best_epoch = epoch
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, history.train_loss[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, history)
    return mdl.ModelWeights(best.config, dict(best.params)), history


def write_run(run_dir, weights, history, config_snapshot):
    """Config JSON, per-epoch history CSV and the best weights file."""
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(config_snapshot, fh, indent=2, sort_keys=True, default=_jsonable)
    with open(os.path.join(run_dir, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss", "best"])
        for e, (lr, tl, vl) in enumerate(zip(history.learning_rate, history.train_loss, history.val_loss)):
            w.writerow([e, repr(lr), repr(tl), repr(vl), int(e == history.best_epoch)])
    mdl.save_weights(weights, os.path.join(run_dir, "weights.bsgw"))


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
