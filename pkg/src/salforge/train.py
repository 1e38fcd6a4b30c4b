"""Classifier training: cross-entropy, SGD with momentum, step LR decay,
augmentation and best-validation checkpointing; accuracy / AUC metrics."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from salforge.errors import ConfigError, DimensionError
from salforge.micronet import backward_seed, forward, save_checkpoint
from salforge.synthdata import Sample

log = logging.getLogger(__name__)


@dataclass
class AugmentFlags:
    hflip: bool = True
    intensity_jitter: bool = True
    affine: bool = True


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 5
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentFlags(**self.augment)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# Recipes as published; momentum is not stated there and defaults to 0.9.
PRESETS = {
    "desk": {},
    "object-cxr": {"epochs": 20, "batch_size": 16, "lr": 0.005, "weight_decay": 0.0},
    "lvot": {"epochs": 60, "batch_size": 64, "lr": 0.0002, "weight_decay": 0.0005},
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown training preset {name!r}")
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    val_accuracies: list = field(default_factory=list)
    best_epoch: int = None
    best_val_accuracy: float = None
    checkpoint: str = None

    def to_dict(self):
        return asdict(self)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(b), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def sgd_momentum_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v.  Updates dicts in place."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = momentum * v + (g + weight_decay * w)
        velocity[name] = v
        params[name] = w - lr * v
    return params, velocity


def lr_schedule(epoch, config):
    return config.lr * (1.0 / config.lr_decay_factor) ** (epoch // config.lr_decay_every)


def augment(sample, flags, rng):
    """Random hflip (p=0.5), intensity scale/shift, and +-5 px translation.

    Boxes follow the image; translations are limited so that every box
    stays inside the frame.
    """
    img = sample.image
    boxes = list(sample.boxes)
    h, w = img.shape[-2:]
    if flags.hflip and rng.random() < 0.5:
        img = img[..., ::-1]
        boxes = [b.hflip(w) for b in boxes]
    if flags.intensity_jitter:
        scale = rng.uniform(0.8, 1.2)
        shift = rng.uniform(-0.1, 0.1)
        img = np.clip(img * scale + shift, 0.0, 1.0)
    if flags.affine:
        dx, dy = (int(v) for v in rng.integers(-5, 6, size=2))
        if boxes:
            dx = min(max(dx, -min(b.x0 for b in boxes)), w - max(b.x1 for b in boxes))
            dy = min(max(dy, -min(b.y0 for b in boxes)), h - max(b.y1 for b in boxes))
        img = translate(img, dx, dy)
        boxes = [b.shift(dx, dy) for b in boxes]
    return Sample(sample.id, np.ascontiguousarray(img), sample.label, boxes, sample.group, sample.path)


def translate(img, dx, dy):
    """Shift content by (dx, dy) pixels with edge replication."""
    h, w = img.shape[-2:]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[..., rows[:, None], cols[None, :]]


def _stack(samples):
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def predict_proba(model, samples, batch_size=64):
    """Softmax class probabilities (``N x 2``) in eval mode."""
    prev = model.mode
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        x, _ = _stack(samples[start:start + batch_size])
        logits, _ = forward(model, x)
        out.append(softmax(np.atleast_2d(logits)))
    model.mode = prev
    return np.concatenate(out) if out else np.zeros((0, 2))


def average_ranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    r = average_ranks(scores)
    return float((r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_classifier(model, split):
    """Accuracy at argmax and AUC of the class-1 probability."""
    probs = predict_proba(model, split)
    labels = np.array([s.label for s in split])
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    return accuracy, roc_auc(probs[:, 1], labels)


def accuracy(model, split):
    probs = predict_proba(model, split)
    labels = np.array([s.label for s in split])
    return float((probs.argmax(axis=1) == labels).mean())


def _snapshot(model):
    return ({k: v.copy() for k, v in model.params.items()}, {k: v.copy() for k, v in model.bn_stats.items()})


def _restore(model, snap):
    model.params = {k: v.copy() for k, v in snap[0].items()}
    model.bn_stats = {k: v.copy() for k, v in snap[1].items()}


def train_loop(model, dataset, config, checkpoint_path=None):
    """Train ``model`` in place and leave it holding the best-validation weights.

    ``dataset`` maps ``"train"`` and ``"val"`` to lists of samples. Data order
    and augmentation draws come from one generator seeded with
    ``config.seed``, so a rerun reproduces the loss curve exactly.
    """
    train, val = dataset.get("train") or [], dataset.get("val") or []
    if not train or not val:
        raise ConfigError("training needs non-empty train and val splits")
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    velocity = {}
    best = _snapshot(model)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        model.train()
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            batch = [augment(train[i], config.augment, rng) for i in perm[start:start + config.batch_size]]
            x, y = _stack(batch)
            logits, record = forward(model, x)
            loss, dlogits = cross_entropy(logits, y)
            backward_seed(model, record, dlogits, param_grads=True, input_grad=False)
            sgd_momentum_step(model.params, record.param_grads, velocity, lr, config.momentum,
                              config.weight_decay)
            losses.append(loss)
        model.eval()
        val_acc = accuracy(model, val)
        report.step_losses.extend(losses)
        report.epoch_losses.append(float(np.mean(losses)))
        report.val_accuracies.append(val_acc)
        log.info("epoch %d lr %.2e loss %.4f val_acc %.4f", epoch, lr, report.epoch_losses[-1], val_acc)
        if report.best_val_accuracy is None or val_acc > report.best_val_accuracy:
            report.best_val_accuracy = val_acc
            report.best_epoch = epoch
            best = _snapshot(model)
    _restore(model, best)
    model.eval()
    if checkpoint_path is not None:
        meta = {"seed": config.seed, "epoch": report.best_epoch, "val_accuracy": report.best_val_accuracy,
                "train_config": config.to_dict()}
        report.checkpoint = str(save_checkpoint(model, checkpoint_path, meta))
    return report
