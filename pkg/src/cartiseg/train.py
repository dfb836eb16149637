"""Adam optimization, learning-rate schedules, the training loop and grid
search over hyperparameters.

Training consumes scan records, slices them along the first axis, applies
per-slice normalization, resizing and augmentation up front, then runs
shuffled mini-batch epochs. A held-out validation share (last 10% of the
training subjects) is scored by mean 2D Dice each epoch and the best
checkpoint is restored at the end.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import time
import warnings

import numpy as np

from . import data as D
from . import metrics
from . import nets
from . import tensor as T

SCHEDULES = ("constant", "exponential")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    schedule: str = "exponential"
    decay_factor: float = 0.93
    restart_period: int = 20
    batch_size: int = 4
    epochs: int = 12
    augment_multiplier: int = 2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.restart_period < 1:
            raise ValueError(f"restart_period must be >= 1, got {self.restart_period}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.augment_multiplier < 1:
            raise ValueError(f"augment_multiplier must be >= 1, got {self.augment_multiplier}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclasses.dataclass
class EpochStats:
    epoch: int
    loss: float
    val_dsc2d: float
    lr: float
    seconds: float


@dataclasses.dataclass
class TrainHistory:
    rows: list[EpochStats] = dataclasses.field(default_factory=list)

    def to_csv(self, fh) -> None:
        fh.write("epoch,loss,val_dsc2d,lr,seconds\n")
        for r in self.rows:
            fh.write(f"{r.epoch},{r.loss!r},{r.val_dsc2d!r},{r.lr!r},{r.seconds!r}\n")


class AdamState:
    """First/second-moment buffers and step counter for one parameter list."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: AdamState, lr: float) -> bool:
    """One Adam update in place. Returns False (and skips the whole step)
    when any gradient is non-finite."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads/state lengths do not match")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
    if any(not np.isfinite(g).all() for g in grads):
        warnings.warn("non-finite gradient, Adam step skipped", RuntimeWarning)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return True


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for an epoch; the exponential mode restarts its decay
    every restart_period epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if config.schedule == "constant":
        return config.learning_rate
    return config.learning_rate * config.decay_factor ** (epoch % config.restart_period)


# ---------------------------------------------------------------------------
# slice preparation


def _prep_volume(record: D.ScanRecord, size: int):
    """Normalized, resized (image, mask) slice arrays for one scan."""
    imgs, msks = [], []
    for z in range(record.image.dims[0]):
        img = D.normalize_slice(record.image.data[z])
        img, msk = D.resize_pair(img, record.mask.data[z], size)
        imgs.append(img)
        msks.append(msk)
    return imgs, msks


def _training_arrays(records, size: int, multiplier: int, rng):
    imgs, msks = [], []
    for record in records:
        r_imgs, r_msks = _prep_volume(record, size)
        for img, msk in zip(r_imgs, r_msks):
            for aug_img, aug_msk in D.augment(img, msk, multiplier, rng):
                imgs.append(aug_img)
                msks.append(aug_msk)
    x = np.stack(imgs)[:, None, :, :].astype(np.float32)
    y = np.stack(msks)[:, None, :, :].astype(np.float32)
    return x, y


def _split_validation(records, val_fraction: float):
    """Hold out the last share of subjects (order of first appearance)."""
    if val_fraction == 0 or len(records) == 0:
        return list(records), []
    subjects = []
    for rec in records:
        if rec.meta.subject_id not in subjects:
            subjects.append(rec.meta.subject_id)
    if len(subjects) < 2:
        return list(records), list(records)     # degenerate: validate on the train scans
    n_val = max(1, round(val_fraction * len(subjects)))
    if n_val >= len(subjects):
        n_val = len(subjects) - 1
    val_set = set(subjects[-n_val:])
    train = [r for r in records if r.meta.subject_id not in val_set]
    val = [r for r in records if r.meta.subject_id in val_set]
    return train, val


def _snapshot(model: nets.Model):
    params = [p.data.copy() for p in model.parameters()]
    buffers = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in model.batchnorms()]
    return params, buffers


def _restore(model: nets.Model, snap):
    params, buffers = snap
    for p, saved in zip(model.parameters(), params):
        p.data = saved.copy()
    for bn, (rm, rv) in zip(model.batchnorms(), buffers):
        bn.running_mean = rm.copy()
        bn.running_var = rv.copy()


def train(model: nets.Model, records, config: TrainConfig,
          rng: np.random.Generator) -> tuple[nets.Model, TrainHistory]:
    """Optimize the model on the given scans; returns the model restored to
    its best-validation parameters plus the per-epoch history."""
    if not records:
        raise ValueError("training set is empty")
    size = model.config.input_size
    train_records, val_records = _split_validation(records, config.val_fraction)
    x, y = _training_arrays(train_records, size, config.augment_multiplier, rng)
    if config.batch_size > x.shape[0]:
        raise ValueError(f"batch_size {config.batch_size} exceeds {x.shape[0]} training slices")

    val_pairs = []
    for rec in val_records:
        v_imgs, v_msks = _prep_volume(rec, size)
        val_pairs.extend(zip(v_imgs, v_msks))

    params = model.parameters()
    state = AdamState(params)
    history = TrainHistory()
    best = None
    n = x.shape[0]
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = model.forward(x[idx], training=True, rng=rng)
            loss = T.bce_loss(out, T.Tensor(y[idx]))
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {start // config.batch_size}")
            model.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite epoch loss at epoch {epoch}")
        val_dsc = _validation_dsc(model, val_pairs)
        history.rows.append(EpochStats(epoch, epoch_loss, val_dsc,
                                       lr, time.perf_counter() - tic))
        # only track checkpoints when a validation score exists; a NaN score
        # would freeze `best` at epoch 0 and restore an untrained model
        if val_pairs and (best is None or val_dsc > best[0]):
            best = (val_dsc, _snapshot(model))
    if best is not None:
        _restore(model, best[1])
    return model, history


def _validation_dsc(model: nets.Model, val_pairs) -> float:
    if not val_pairs:
        return float("nan")
    scores = []
    for start in range(0, len(val_pairs), 8):
        chunk = val_pairs[start:start + 8]
        batch = np.stack([img for img, _ in chunk])[:, None, :, :]
        probs = model.forward(batch).data
        for i, (_, msk) in enumerate(chunk):
            scores.append(metrics.dsc_2d(nets.binarize(probs[i, 0]), msk))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# volume inference


def segment_volume(model: nets.Model, volume: D.Volume, batch: int = 8
                   ) -> tuple[D.MaskVolume, float]:
    """Predict a binary mask for every slice; returns (mask, seconds).

    Slices are normalized and resized to the model's input extent; the
    probability maps are resized back bilinearly before thresholding.
    Constant slices (nothing to normalize) predict empty.
    """
    tic = time.perf_counter()
    size = model.config.input_size
    d, h, w = volume.dims
    out = np.zeros((d, h, w), dtype=np.uint8)
    todo = []
    for z in range(d):
        try:
            img = D.normalize_slice(volume.data[z])
        except D.ConstantImageError:
            continue
        img, _ = D.resize_pair(img, np.zeros_like(img, dtype=np.uint8), size)
        todo.append((z, img))
    for start in range(0, len(todo), batch):
        chunk = todo[start:start + batch]
        stack = np.stack([img for _, img in chunk])[:, None, :, :]
        probs = model.forward(stack).data
        for i, (z, _) in enumerate(chunk):
            prob = probs[i, 0].astype(np.float64)
            if (h, w) != (size, size):
                prob = D._bilinear_matrix(h, size) @ prob @ D._bilinear_matrix(w, size).T
            out[z] = nets.binarize(prob)
    return D.MaskVolume(out, volume.voxel_size_mm), time.perf_counter() - tic


# ---------------------------------------------------------------------------
# grid search


def grid_search(space: dict, folds: list, model_config: nets.ModelConfig,
                train_config: TrainConfig, seed: int, budget: int | None = None
                ) -> list[dict]:
    """Evaluate every grid point under identical per-fold seeds and rank by
    mean held-out 3D Dice.

    ``space`` maps parameter names (TrainConfig or ModelConfig fields) to
    candidate lists; ``folds`` is a list of (train_records, test_records).
    """
    if not space:
        raise ValueError("grid space is empty")
    if not folds:
        raise ValueError("no folds supplied")
    names = sorted(space)
    combos = list(itertools.product(*(space[k] for k in names)))
    if budget is not None:
        combos = combos[:budget]
    model_fields = {f.name for f in dataclasses.fields(nets.ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    results = []
    for combo in combos:
        point = dict(zip(names, combo))
        bad = [k for k in point if k not in model_fields | train_fields]
        if bad:
            raise ValueError(f"unknown grid parameters {bad}")
        m_cfg = dataclasses.replace(model_config,
                                    **{k: v for k, v in point.items() if k in model_fields})
        t_cfg = dataclasses.replace(train_config,
                                    **{k: v for k, v in point.items() if k in train_fields})
        per_fold = []
        for fold_id, (train_records, test_records) in enumerate(folds):
            model = nets.build_model(m_cfg, np.random.default_rng((seed, fold_id, 0)))
            if t_cfg.epochs > 0:
                model, _ = train(model, train_records, t_cfg,
                                 np.random.default_rng((seed, fold_id, 1)))
            scores = []
            for rec in test_records:
                pred, _ = segment_volume(model, rec.image)
                scores.append(metrics.dsc_3d(pred, rec.mask))
            per_fold.append(float(np.mean(scores)))
        arr = np.asarray(per_fold)
        results.append({
            "params": point,
            "mean_dsc3d": float(arr.mean()),
            "sd_dsc3d": float(arr.std()),
            "per_fold": per_fold,
        })
    results.sort(key=lambda r: -r["mean_dsc3d"])
    return results
