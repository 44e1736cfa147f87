"""Mini-batch SGD training with polynomial learning-rate decay and global
gradient-norm clipping.

The loop is: forward -> MSE loss -> backward -> clip -> SGD step, with the
learning rate following lr0 * (1 - iter/max_iter)**power down to zero at
the iteration cap. Train loss is recorded every iteration and a validation
cloud F-score every ``eval_every`` iterations (and at the end). Everything
is deterministic for a fixed seed, including batch shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, NumericalError, ShapeError
from .layers import mse_loss
from .metrics import confusion, f_score, precision, recall
from .network import (
    GradStore,
    ModelParams,
    NetworkConfig,
    build_model,
    model_backward,
    model_forward,
    named_parameters,
)

# SampleSet convention: list of (x, y) with x (1, C, h, w) in [0, 1] and
# y (1, 2, h, w) binary; y channel 0 is cloud, channel 1 is shadow.


@dataclass
class TrainConfig:
    lr0: float = 0.1
    max_iter: int = 3000
    poly_power: float = 0.9
    batch_size: int = 10
    clip_norm: float = 1.0
    momentum: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    loss_reduction: str = "per_element"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ArgumentError(f"lr0 must be > 0, got {self.lr0}")
        if self.max_iter < 1:
            raise ArgumentError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.poly_power <= 0:
            raise ArgumentError(f"poly_power must be > 0, got {self.poly_power}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.clip_norm <= 0:
            raise ArgumentError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.momentum < 0:
            raise ArgumentError(f"momentum must be >= 0, got {self.momentum}")
        if self.loss_reduction not in ("per_element", "per_sample"):
            raise ArgumentError(f"unknown loss_reduction {self.loss_reduction!r}")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - iter/max_iter)**power; exactly lr0 at 0 and 0 at the cap."""
    if not (0 <= iteration <= cfg.max_iter):
        raise ArgumentError(
            f"iteration {iteration} outside [0, {cfg.max_iter}]"
        )
    return cfg.lr0 * (1.0 - iteration / cfg.max_iter) ** cfg.poly_power


def gradient_norm(grads: GradStore) -> float:
    total = 0.0
    for g in grads.params.values():
        total += float(np.vdot(g, g))
    return float(np.sqrt(total))


def clip_gradients(grads: GradStore, clip_norm: float) -> GradStore:
    """Scale all gradients by clip_norm/norm when the global L2 norm exceeds
    clip_norm; otherwise return them unchanged."""
    if clip_norm <= 0:
        raise ArgumentError(f"clip_norm must be > 0, got {clip_norm}")
    norm = gradient_norm(grads)
    if not np.isfinite(norm):
        raise NumericalError(f"gradient norm is {norm}")
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    scaled = {name: g * scale for name, g in grads.params.items()}
    d_input = None if grads.d_input is None else grads.d_input * scale
    return GradStore(params=scaled, d_input=d_input)


def sgd_step(params: ModelParams, grads: GradStore, lr: float,
             momentum: float = 0.0, velocity: dict | None = None) -> dict:
    """In-place SGD update: v = momentum*v + g; p -= lr*v.

    Returns the velocity state to pass back on the next step. With zero
    momentum this is plain gradient descent.
    """
    if velocity is None:
        velocity = {}
    for name, arr in named_parameters(params):
        g = grads.params.get(name)
        if g is None:
            continue
        if g.shape != arr.shape:
            raise ShapeError(f"gradient {name} shape {g.shape} != param {arr.shape}")
        if momentum > 0:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
        else:
            v = g
        arr -= (lr * v).astype(arr.dtype)
    return velocity


def make_batches(samples, batch_size: int, seed: int):
    """Endless iterator of index arrays; each epoch is a fresh shuffle of
    the whole sample list cut into consecutive batches."""
    n = len(samples)
    if n == 0:
        raise ArgumentError("sample set is empty")
    if batch_size > n:
        raise ArgumentError(f"batch_size {batch_size} exceeds sample count {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def collate(samples, indices):
    xs = [samples[i][0] for i in indices]
    ys = [samples[i][1] for i in indices]
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def validation_f_scores(params: ModelParams, samples, threshold: float = 0.5,
                        batch: int = 8):
    """(cloud F1, shadow F1) over a sample list, eval mode, at a threshold."""
    from .pipeline import binarize, merge_masks  # local import avoids a cycle

    counts = {"cloud": None, "shadow": None}
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        x = np.concatenate([s[0] for s in chunk], axis=0)
        y = np.concatenate([s[1] for s in chunk], axis=0)
        pred, _ = model_forward(x, params, "eval")
        for i in range(x.shape[0]):
            mask = merge_masks(binarize(pred[i, 0], threshold),
                               binarize(pred[i, 1], threshold))
            ref = merge_masks(y[i, 0] >= 0.5, y[i, 1] >= 0.5)
            for cls in ("cloud", "shadow"):
                c = confusion(mask, ref, cls)
                if counts[cls] is None:
                    counts[cls] = c
                else:
                    counts[cls].tp += c.tp
                    counts[cls].tn += c.tn
                    counts[cls].fp += c.fp
                    counts[cls].fn += c.fn
    out = []
    for cls in ("cloud", "shadow"):
        c = counts[cls]
        out.append(f_score(recall(c), precision(c)))
    return tuple(out)


def train(net_config: NetworkConfig, cfg: TrainConfig, train_samples,
          val_samples=None, checkpoint_callback=None):
    """Run the training loop; returns (params, curves).

    curves is a list of dicts with keys iter, lr, loss and, on evaluation
    iterations, val_f1 (validation cloud F-score). ``checkpoint_callback``
    is called as callback(iteration, params) every ``checkpoint_every``
    iterations.
    """
    for x, y in train_samples:
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"patch dims must be divisible by 8, got {x.shape}")
    params = build_model(net_config, seed=cfg.seed)
    batches = make_batches(train_samples, cfg.batch_size, seed=cfg.seed + 1)
    velocity = None
    curves = []
    for it in range(cfg.max_iter):
        lr = poly_lr(it, cfg)
        x, y = collate(train_samples, next(batches))
        pred, cache = model_forward(x, params, "train")
        loss, dloss = mse_loss(pred, y, cfg.loss_reduction)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite training loss {loss} at iteration {it} (lr={lr:.3g})"
            )
        grads = model_backward(cache, dloss)
        grads = clip_gradients(grads, cfg.clip_norm)
        velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
        record = {"iter": it, "lr": lr, "loss": loss}
        last = it == cfg.max_iter - 1
        if val_samples and cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or last):
            cloud_f1, shadow_f1 = validation_f_scores(params, val_samples)
            record["val_f1"] = cloud_f1
            record["val_f1_shadow"] = shadow_f1
        curves.append(record)
        if checkpoint_callback and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint_callback(it, params)
    return params, curves


def curve_log_lines(curves) -> list:
    """Render curve records as 'iter<TAB>lr<TAB>loss[<TAB>val_f1]' lines."""
    lines = []
    for rec in curves:
        parts = [str(rec["iter"]), repr(rec["lr"]), repr(rec["loss"])]
        if "val_f1" in rec:
            v = rec["val_f1"]
            parts.append("nan" if v is None else repr(v))
        lines.append("\t".join(parts))
    return lines
