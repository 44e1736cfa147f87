"""Finite-difference verification of every backward pass.

Each check builds a small 64-bit instance of a layer (or a whole tiny
model), computes analytic gradients, and compares them against central
finite differences with step 1e-4. The reported figure is

    max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-6)

i.e. the worst absolute disagreement relative to the gradient scale of
that tensor, which stays meaningful for elements whose true gradient is
exactly zero (ReLU-masked paths and the like). ReLU inputs are kept away
from the kink at 0 and pooling inputs are built with distinct values so
the central difference never straddles a non-smooth point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, network
from .errors import ArgumentError

EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_gradient(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _distinct_values(rng, shape):
    # a shuffled lattice: pairwise gaps >= 1/size, so +-eps never reorders
    size = int(np.prod(shape))
    vals = rng.permutation(size).astype(np.float64) / size - 0.5
    return vals.reshape(shape)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x


def check_conv(seed=11, dilation=1) -> float:
    rng = _rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    p = layers.ConvParams(
        weights=rng.normal(size=(4, 3, 3, 3)) * 0.5,
        bias=rng.normal(size=4),
        dilation=dilation,
    )
    proj = rng.normal(size=(2, 4, 8, 8))

    def loss():
        return float(np.vdot(layers.conv2d_forward(x, p), proj))

    dx, dw, db = layers.conv2d_backward(x, p, proj)
    worst = rel_error(dx, numeric_gradient(loss, x))
    worst = max(worst, rel_error(dw, numeric_gradient(loss, p.weights)))
    worst = max(worst, rel_error(db, numeric_gradient(loss, p.bias)))
    return worst


def check_deconv(seed=12, stride=2, kernel=3) -> float:
    rng = _rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    p = layers.ConvParams(
        weights=rng.normal(size=(3, 2, kernel, kernel)) * 0.5,
        bias=rng.normal(size=2),
        stride=stride,
        transposed=True,
    )
    proj = rng.normal(size=(2, 2, 4 * stride, 4 * stride))

    def loss():
        return float(np.vdot(layers.deconv2d_forward(x, p), proj))

    dx, dw, db = layers.deconv2d_backward(x, p, proj)
    worst = rel_error(dx, numeric_gradient(loss, x))
    worst = max(worst, rel_error(dw, numeric_gradient(loss, p.weights)))
    worst = max(worst, rel_error(db, numeric_gradient(loss, p.bias)))
    return worst


def check_relu(seed=13) -> float:
    rng = _rng(seed)
    x = _away_from_zero(rng, (2, 3, 6, 6))
    proj = rng.normal(size=x.shape)

    def loss():
        return float(np.vdot(layers.relu_forward(x), proj))

    dx = layers.relu_backward(x, proj)
    return rel_error(dx, numeric_gradient(loss, x))


def check_maxpool(seed=14) -> float:
    rng = _rng(seed)
    x = _distinct_values(rng, (2, 2, 6, 6))
    proj = rng.normal(size=(2, 2, 3, 3))

    def loss():
        y, _ = layers.maxpool_forward(x)
        return float(np.vdot(y, proj))

    _, idx = layers.maxpool_forward(x)
    dx = layers.maxpool_backward(idx, proj)
    return rel_error(dx, numeric_gradient(loss, x))


def check_batchnorm(seed=15) -> float:
    rng = _rng(seed)
    x = rng.normal(size=(4, 3, 5, 5))
    p = layers.BNParams(
        gamma=rng.normal(size=3) + 1.5,
        beta=rng.normal(size=3),
        running_mean=np.zeros(3),
        running_var=np.ones(3),
    )
    proj = rng.normal(size=x.shape)

    def loss():
        y, _ = layers.batchnorm_forward(x, p, "train")
        return float(np.vdot(y, proj))

    _, cache = layers.batchnorm_forward(x, p, "train")
    dx, dg, db = layers.batchnorm_backward(cache, proj)
    worst = rel_error(dx, numeric_gradient(loss, x))
    worst = max(worst, rel_error(dg, numeric_gradient(loss, p.gamma)))
    worst = max(worst, rel_error(db, numeric_gradient(loss, p.beta)))
    return worst


def check_mse(seed=16) -> float:
    rng = _rng(seed)
    pred = rng.normal(size=(2, 2, 4, 4))
    target = rng.random((2, 2, 4, 4))

    def loss():
        return layers.mse_loss(pred, target)[0]

    _, grad = layers.mse_loss(pred, target)
    # absolute comparison per the loss contract
    return float(np.abs(grad - numeric_gradient(loss, pred)).max())


def _tiny_block(seed, in_ch=3, out_ch=4, residual=True):
    init = network._Init(seed, np.float64)
    return network._make_block(init, in_ch, out_ch, dilation=2, residual=residual)


def check_cbrr(seed=17) -> float:
    rng = _rng(seed)
    bp = _tiny_block(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    proj = rng.normal(size=(2, 4, 8, 8))

    def loss():
        y, _ = network.cbrr_forward(x, bp, True, "train")
        return float(np.vdot(y, proj))

    _, cache = network.cbrr_forward(x, bp, True, "train")
    grads: dict = {}
    dx = network.cbrr_backward(bp, cache, proj, grads, "blk")
    worst = rel_error(dx, numeric_gradient(loss, x))
    for name, arr in network._block_tensors("blk", bp, stats=False):
        worst = max(worst, rel_error(grads[name], numeric_gradient(loss, arr)))
    return worst


def check_model(seed=18, n_params=10) -> float:
    rng = _rng(seed)
    cfg = network.NetworkConfig(in_channels=3, filters=4)
    params = network.build_model(cfg, seed=seed, dtype=np.float64)
    x = rng.normal(size=(1, 3, 16, 16)) * 0.5 + 0.5
    y0, cache = network.model_forward(x, params, "train")
    proj = rng.normal(size=y0.shape)

    def loss():
        y, _ = network.model_forward(x, params, "train")
        return float(np.vdot(y, proj))

    gs = network.model_backward(cache, proj)
    named = network.named_parameters(params)
    picks = rng.choice(len(named), size=min(n_params, len(named)), replace=False)
    worst = 0.0
    for pi in picks:
        name, arr = named[pi]
        analytic = gs.params[name]
        flat_idx = int(rng.integers(arr.size))
        orig = arr.reshape(-1)[flat_idx]
        arr.reshape(-1)[flat_idx] = orig + EPS
        hi = loss()
        arr.reshape(-1)[flat_idx] = orig - EPS
        lo = loss()
        arr.reshape(-1)[flat_idx] = orig
        numeric = (hi - lo) / (2 * EPS)
        scale = max(np.abs(analytic).max(), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic.reshape(-1)[flat_idx] - numeric) / scale)
    # a few input pixels as well
    for _ in range(5):
        flat_idx = int(rng.integers(x.size))
        orig = x.reshape(-1)[flat_idx]
        x.reshape(-1)[flat_idx] = orig + EPS
        hi = loss()
        x.reshape(-1)[flat_idx] = orig - EPS
        lo = loss()
        x.reshape(-1)[flat_idx] = orig
        numeric = (hi - lo) / (2 * EPS)
        scale = max(np.abs(gs.d_input).max(), abs(numeric), 1e-6)
        worst = max(worst, abs(gs.d_input.reshape(-1)[flat_idx] - numeric) / scale)
    return worst


LAYER_CHECKS = {
    "conv": [
        ("conv 3x3 dilation 1", lambda: check_conv(dilation=1), 1e-5),
        ("conv 3x3 dilation 2", lambda: check_conv(seed=21, dilation=2), 1e-5),
    ],
    "deconv": [
        ("deconv stride 2 kernel 3", lambda: check_deconv(), 1e-5),
        ("deconv stride 4 kernel 8", lambda: check_deconv(seed=22, stride=4, kernel=8), 1e-5),
    ],
    "relu": [("relu", check_relu, 1e-5)],
    "pool": [("maxpool 2x2", check_maxpool, 1e-5)],
    "bn": [("batchnorm train", check_batchnorm, 1e-4)],
    "mse": [("mse loss (absolute)", check_mse, 1e-8)],
    "model": [
        ("cbrr block", check_cbrr, 1e-4),
        ("full model (tiny)", check_model, 1e-3),
    ],
}


def run_checks(which: str = "all") -> list[CheckResult]:
    """Run the named check group ('all' or a LAYER_CHECKS key)."""
    if which == "all":
        groups = list(LAYER_CHECKS)
    elif which in LAYER_CHECKS:
        groups = [which]
    else:
        raise ArgumentError(f"unknown gradcheck group {which!r}")
    results = []
    for g in groups:
        for name, fn, tol in LAYER_CHECKS[g]:
            results.append(CheckResult(name, fn(), tol))
    return results
