"""The segmentation network: a symmetric six-block encoder-decoder with
skip connections and a multi-scale fusion head.

Topology
--------
Each block is three (conv -> batchnorm -> ReLU) stages with an optional
residual connection added before the final ReLU (a 1x1 projection bridges
channel mismatches). The encoder pools after the first three blocks and
dilates the last two (dilations 2 and 4), so its six outputs sit at scales
{1, 1/2, 1/4, 1/8, 1/8, 1/8} of the input. The decoder mirrors it: two
dilated blocks (4, 2), one plain block, then three stride-2 transposed
convolutions interleaved with blocks back up to full resolution. Each
decoder block output is summed elementwise with its equal-size encoder
mirror, and those six summed maps form the feature pyramid.

The fusion head upsamples the five sub-resolution pyramid entries to full
resolution with learned transposed convolutions (kernel = 2*stride),
concatenates all six, and applies a final 3x3 convolution with two linear
output channels: a cloud map and a cloud-shadow map. With fusion disabled
the final convolution reads the full-resolution pyramid entry alone; with
residuals disabled the blocks are plain conv stacks.

``model_forward`` in train mode returns a cache that ``model_backward``
unwinds to produce gradients for every parameter. Eval-mode forwards are
pure (no cache, no running-stat updates) and may run concurrently over a
shared ModelParams.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ArgumentError, ShapeError
from .layers import (
    BNParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
)
from .tensor import Tensor4, concat_channels, normal_draws

# number of encoder/decoder blocks and how many pools/upsamplers sit between them
NUM_BLOCKS = 6
NUM_POOLS = 3
FUSION_STRIDES = (8, 8, 8, 4, 2)  # pyramid scales 1/8, 1/8, 1/8, 1/4, 1/2


@dataclass
class NetworkConfig:
    in_channels: int = 4
    filters: tuple = (64,) * NUM_BLOCKS
    encoder_dilations: tuple = (1, 1, 1, 1, 2, 4)
    decoder_dilations: tuple = (4, 2, 1, 1, 1, 1)
    fusion_enabled: bool = True
    residual_enabled: bool = True
    out_channels: int = 2

    def __post_init__(self):
        if isinstance(self.filters, int):
            self.filters = (self.filters,) * NUM_BLOCKS
        self.filters = tuple(int(f) for f in self.filters)
        self.encoder_dilations = tuple(int(d) for d in self.encoder_dilations)
        self.decoder_dilations = tuple(int(d) for d in self.decoder_dilations)
        if len(self.filters) != NUM_BLOCKS:
            raise ArgumentError(f"filters needs {NUM_BLOCKS} entries, got {self.filters}")
        if len(self.encoder_dilations) != NUM_BLOCKS or len(self.decoder_dilations) != NUM_BLOCKS:
            raise ArgumentError("dilation lists need one entry per block")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ArgumentError("channel counts must be positive")
        if any(f < 1 for f in self.filters):
            raise ArgumentError("filter counts must be positive")
        if any(d < 1 for d in self.encoder_dilations + self.decoder_dilations):
            raise ArgumentError("dilations must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("filters", "encoder_dilations", "decoder_dilations"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BlockParams:
    """One three-conv block, plus the optional residual projection."""

    convs: list          # 3 x ConvParams
    bns: list            # 3 x BNParams
    proj_conv: ConvParams | None = None
    proj_bn: BNParams | None = None


@dataclass
class ModelParams:
    config: NetworkConfig
    encoder: list = field(default_factory=list)    # 6 BlockParams, shallow to deep
    decoder: list = field(default_factory=list)    # 6 BlockParams, deep to shallow
    upsamplers: list = field(default_factory=list)  # 3 stride-2 transposed convs
    fusion_ups: list = field(default_factory=list)  # 5 transposed convs (empty if no fusion)
    head_conv: ConvParams | None = None


@dataclass
class GradStore:
    """Parameter gradients keyed by the named_parameters() names."""

    params: dict
    d_input: np.ndarray | None = None


class _Init:
    """He-style normal initializer with a per-tensor deterministic stream."""

    def __init__(self, seed: int, dtype):
        self.seed = int(seed)
        self.dtype = dtype
        self.counter = 0

    def normal(self, shape, stddev: float) -> np.ndarray:
        self.counter += 1
        draws = normal_draws(int(np.prod(shape)), (self.seed, self.counter))
        return (stddev * draws).astype(self.dtype).reshape(shape)

    def conv(self, out_ch: int, in_ch: int, r: int, dilation: int = 1) -> ConvParams:
        std = np.sqrt(2.0 / (in_ch * r * r))
        return ConvParams(
            weights=self.normal((out_ch, in_ch, r, r), std),
            bias=np.zeros(out_ch, dtype=self.dtype),
            dilation=dilation,
        )

    def deconv(self, in_ch: int, out_ch: int, stride: int, r: int) -> ConvParams:
        # roughly (r/stride)^2 taps feed each output unit
        taps = -(-r // stride)
        std = np.sqrt(2.0 / (in_ch * taps * taps))
        return ConvParams(
            weights=self.normal((in_ch, out_ch, r, r), std),
            bias=np.zeros(out_ch, dtype=self.dtype),
            stride=stride,
            transposed=True,
        )

    def bn(self, channels: int) -> BNParams:
        return BNParams(
            gamma=np.ones(channels, dtype=self.dtype),
            beta=np.zeros(channels, dtype=self.dtype),
            running_mean=np.zeros(channels, dtype=self.dtype),
            running_var=np.ones(channels, dtype=self.dtype),
        )


def _make_block(init: _Init, in_ch: int, out_ch: int, dilation: int,
                residual: bool) -> BlockParams:
    convs = [
        init.conv(out_ch, in_ch, 3, dilation),
        init.conv(out_ch, out_ch, 3, dilation),
        init.conv(out_ch, out_ch, 3, dilation),
    ]
    bns = [init.bn(out_ch) for _ in range(3)]
    proj_conv = proj_bn = None
    if residual and in_ch != out_ch:
        proj_conv = init.conv(out_ch, in_ch, 1)
        proj_bn = init.bn(out_ch)
    return BlockParams(convs=convs, bns=bns, proj_conv=proj_conv, proj_bn=proj_bn)


def build_model(config: NetworkConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Freshly initialized parameters, deterministic for a given seed."""
    init = _Init(seed, dtype)
    f = config.filters
    params = ModelParams(config=config)

    in_ch = config.in_channels
    for i in range(NUM_BLOCKS):
        params.encoder.append(
            _make_block(init, in_ch, f[i], config.encoder_dilations[i],
                        config.residual_enabled)
        )
        in_ch = f[i]

    # decoder runs deep to shallow: index i handles the mirror of encoder 5-i
    in_ch = f[NUM_BLOCKS - 1]
    for i in range(NUM_BLOCKS):
        out_ch = f[NUM_BLOCKS - 1 - i]
        if i >= NUM_BLOCKS - NUM_POOLS:
            # a stride-2 transposed conv lifts the previous decoder output
            # and carries any channel reduction
            params.upsamplers.append(init.deconv(in_ch, out_ch, stride=2, r=3))
            in_ch = out_ch
        params.decoder.append(
            _make_block(init, in_ch, out_ch, config.decoder_dilations[i],
                        config.residual_enabled)
        )
        in_ch = out_ch

    if config.fusion_enabled:
        for j, s in enumerate(FUSION_STRIDES):
            ch = f[NUM_BLOCKS - 1 - j]
            params.fusion_ups.append(init.deconv(ch, ch, stride=s, r=2 * s))
        head_in = sum(f)
    else:
        head_in = f[0]
    params.head_conv = init.conv(config.out_channels, head_in, 3)
    return params


# ---------------------------------------------------------------------------
# parameter enumeration (single source of truth for names and ordering)
# ---------------------------------------------------------------------------

def _block_tensors(prefix: str, bp: BlockParams, stats: bool):
    for i in range(3):
        yield f"{prefix}.conv{i + 1}.weights", bp.convs[i].weights
        yield f"{prefix}.conv{i + 1}.bias", bp.convs[i].bias
        yield f"{prefix}.bn{i + 1}.gamma", bp.bns[i].gamma
        yield f"{prefix}.bn{i + 1}.beta", bp.bns[i].beta
        if stats:
            yield f"{prefix}.bn{i + 1}.running_mean", bp.bns[i].running_mean
            yield f"{prefix}.bn{i + 1}.running_var", bp.bns[i].running_var
    if bp.proj_conv is not None:
        yield f"{prefix}.proj.weights", bp.proj_conv.weights
        yield f"{prefix}.proj.bias", bp.proj_conv.bias
        yield f"{prefix}.proj_bn.gamma", bp.proj_bn.gamma
        yield f"{prefix}.proj_bn.beta", bp.proj_bn.beta
        if stats:
            yield f"{prefix}.proj_bn.running_mean", bp.proj_bn.running_mean
            yield f"{prefix}.proj_bn.running_var", bp.proj_bn.running_var


def _named(params: ModelParams, stats: bool):
    for i, bp in enumerate(params.encoder):
        yield from _block_tensors(f"enc{i + 1}", bp, stats)
    for i, bp in enumerate(params.decoder):
        if i >= NUM_BLOCKS - NUM_POOLS:
            up = params.upsamplers[i - (NUM_BLOCKS - NUM_POOLS)]
            yield f"updec{NUM_BLOCKS - i}.weights", up.weights
            yield f"updec{NUM_BLOCKS - i}.bias", up.bias
        yield from _block_tensors(f"dec{NUM_BLOCKS - i}", bp, stats)
    for j, up in enumerate(params.fusion_ups):
        yield f"fup{NUM_BLOCKS - j}.weights", up.weights
        yield f"fup{NUM_BLOCKS - j}.bias", up.bias
    yield "head.weights", params.head_conv.weights
    yield "head.bias", params.head_conv.bias


def named_parameters(params: ModelParams):
    """Ordered (name, array) pairs for every learnable tensor."""
    return list(_named(params, stats=False))


def named_tensors(params: ModelParams):
    """Like named_parameters but including BN running statistics."""
    return list(_named(params, stats=True))


def count_parameters(params: ModelParams):
    """(learnable element count, total stored element count)."""
    learnable = sum(a.size for _, a in named_parameters(params))
    total = sum(a.size for _, a in named_tensors(params))
    return learnable, total


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def cbrr_forward(x: Tensor4, bp: BlockParams, residual_enabled: bool, mode: str):
    """One block forward pass. Returns (y, cache); cache is None in eval."""
    train = mode == "train"
    stage_in = x
    stage_caches = []
    pre = None
    for i in range(3):
        z = conv2d_forward(stage_in, bp.convs[i])
        zn, bn_cache = batchnorm_forward(z, bp.bns[i], mode)
        if train:
            stage_caches.append((stage_in, bn_cache, zn))
        if i < 2:
            stage_in = relu_forward(zn)
        else:
            pre = zn
    if residual_enabled:
        if bp.proj_conv is not None:
            rz = conv2d_forward(x, bp.proj_conv)
            r, proj_cache = batchnorm_forward(rz, bp.proj_bn, mode)
        else:
            r, proj_cache = x, None
        pre = pre + r
    else:
        proj_cache = None
    y = relu_forward(pre)
    if not train:
        return y, None
    return y, (x, stage_caches, pre, proj_cache, residual_enabled)


def cbrr_backward(bp: BlockParams, cache, grad_out: Tensor4, grads: dict, prefix: str):
    """Backward through one block; accumulates parameter grads, returns dx."""
    x, stage_caches, pre, proj_cache, residual_enabled = cache
    d = relu_backward(pre, grad_out)
    d_res = d if residual_enabled else None
    for i in (2, 1, 0):
        stage_in, bn_cache, zn = stage_caches[i]
        if i < 2:
            d = relu_backward(zn, d)
        d, dg, dbta = batchnorm_backward(bn_cache, d)
        grads[f"{prefix}.bn{i + 1}.gamma"] = dg
        grads[f"{prefix}.bn{i + 1}.beta"] = dbta
        d, dw, db = conv2d_backward(stage_in, bp.convs[i], d)
        grads[f"{prefix}.conv{i + 1}.weights"] = dw
        grads[f"{prefix}.conv{i + 1}.bias"] = db
    dx = d
    if residual_enabled:
        if bp.proj_conv is not None:
            dr, dg, dbta = batchnorm_backward(proj_cache, d_res)
            grads[f"{prefix}.proj_bn.gamma"] = dg
            grads[f"{prefix}.proj_bn.beta"] = dbta
            dr, dw, db = conv2d_backward(x, bp.proj_conv, dr)
            grads[f"{prefix}.proj.weights"] = dw
            grads[f"{prefix}.proj.bias"] = db
            dx = dx + dr
        else:
            dx = dx + d_res
    return dx


def encoder_forward(x: Tensor4, params: ModelParams, mode: str):
    """Runs the six encoder blocks. Returns (block outputs, cache)."""
    cfg = params.config
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"input spatial dims must be divisible by 8, got {x.shape}")
    outputs = []
    block_caches = []
    pool_indices = []
    t = x
    for i in range(NUM_BLOCKS):
        y, c = cbrr_forward(t, params.encoder[i], cfg.residual_enabled, mode)
        outputs.append(y)
        block_caches.append(c)
        if i < NUM_POOLS:
            t, idx = maxpool_forward(y)
            pool_indices.append(idx)
        else:
            t = y
    return outputs, (block_caches, pool_indices)


def decoder_forward(enc_outputs, params: ModelParams, mode: str):
    """Runs the decoder; returns (pyramid deepest-first, cache).

    pyramid[i] is the i-th decoder output after its skip sum, at scales
    {1/8, 1/8, 1/8, 1/4, 1/2, 1} of the input.
    """
    cfg = params.config
    pyramid = []
    block_caches = []
    up_inputs = []
    d = enc_outputs[NUM_BLOCKS - 1]
    for i in range(NUM_BLOCKS):
        if i >= NUM_BLOCKS - NUM_POOLS:
            up = params.upsamplers[i - (NUM_BLOCKS - NUM_POOLS)]
            up_inputs.append(d)
            d = deconv2d_forward(d, up)
        y, c = cbrr_forward(d, params.decoder[i], cfg.residual_enabled, mode)
        block_caches.append(c)
        skip = enc_outputs[NUM_BLOCKS - 1 - i]
        if y.shape != skip.shape:
            raise ShapeError(
                f"skip mismatch at decoder {NUM_BLOCKS - i}: {y.shape} vs {skip.shape}"
            )
        d = y + skip
        pyramid.append(d)
    return pyramid, (block_caches, up_inputs)


def fusion_forward(pyramid, params: ModelParams, mode: str):
    """Fusion head. Returns (output map, cache)."""
    cfg = params.config
    if cfg.fusion_enabled:
        lifted = []
        for j in range(len(FUSION_STRIDES)):
            lifted.append(deconv2d_forward(pyramid[j], params.fusion_ups[j]))
        lifted.append(pyramid[NUM_BLOCKS - 1])
        cat = concat_channels(lifted)
    else:
        cat = pyramid[NUM_BLOCKS - 1]
    y = conv2d_forward(cat, params.head_conv)
    if mode == "eval":
        return y, None
    return y, cat


def model_forward(x: Tensor4, params: ModelParams, mode: str = "eval"):
    """Full forward pass. Returns (output n x out_channels x h x w, cache).

    The cache is None in eval mode; in train mode pass it to
    ``model_backward`` together with the loss gradient.
    """
    cfg = params.config
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, model expects {cfg.in_channels}"
        )
    enc_outputs, enc_cache = encoder_forward(x, params, mode)
    pyramid, dec_cache = decoder_forward(enc_outputs, params, mode)
    y, cat = fusion_forward(pyramid, params, mode)
    if mode == "eval":
        return y, None
    cache = {
        "params": params,
        "x": x,
        "enc_outputs": enc_outputs,
        "enc_cache": enc_cache,
        "pyramid": pyramid,
        "dec_cache": dec_cache,
        "cat": cat,
    }
    return y, cache


def model_backward(cache, loss_grad: Tensor4) -> GradStore:
    """Backpropagate a loss gradient through the cached forward pass."""
    params: ModelParams = cache["params"]
    cfg = params.config
    grads: dict = {}

    enc_outputs = cache["enc_outputs"]
    pyramid = cache["pyramid"]
    enc_block_caches, pool_indices = cache["enc_cache"]
    dec_block_caches, up_inputs = cache["dec_cache"]

    # head and fusion
    d_cat, dw, db = conv2d_backward(cache["cat"], params.head_conv, loss_grad)
    grads["head.weights"] = dw
    grads["head.bias"] = db
    d_pyramid = [None] * NUM_BLOCKS
    if cfg.fusion_enabled:
        sizes = [params.config.filters[NUM_BLOCKS - 1 - j] for j in range(NUM_BLOCKS)]
        offsets = np.cumsum([0] + sizes)
        for j in range(len(FUSION_STRIDES)):
            piece = d_cat[:, offsets[j]:offsets[j + 1]]
            dpj, dw, db = deconv2d_backward(pyramid[j], params.fusion_ups[j], piece)
            grads[f"fup{NUM_BLOCKS - j}.weights"] = dw
            grads[f"fup{NUM_BLOCKS - j}.bias"] = db
            d_pyramid[j] = dpj
        d_pyramid[NUM_BLOCKS - 1] = np.ascontiguousarray(
            d_cat[:, offsets[NUM_BLOCKS - 1]:offsets[NUM_BLOCKS]]
        )
    else:
        d_pyramid[NUM_BLOCKS - 1] = d_cat

    # decoder chain, shallow to deep
    d_enc = [None] * NUM_BLOCKS
    carry = None  # gradient w.r.t. the running decoder value before stage i
    for i in range(NUM_BLOCKS - 1, -1, -1):
        dd = d_pyramid[i]
        if dd is None:
            dd = carry
        elif carry is not None:
            dd = dd + carry
        # pyramid[i] = block_out + skip
        mirror = NUM_BLOCKS - 1 - i
        d_enc[mirror] = dd if d_enc[mirror] is None else d_enc[mirror] + dd
        dblock = cbrr_backward(
            params.decoder[i], dec_block_caches[i], dd, grads, f"dec{NUM_BLOCKS - i}"
        )
        if i >= NUM_BLOCKS - NUM_POOLS:
            k = i - (NUM_BLOCKS - NUM_POOLS)
            dblock, dw, db = deconv2d_backward(up_inputs[k], params.upsamplers[k], dblock)
            grads[f"updec{NUM_BLOCKS - i}.weights"] = dw
            grads[f"updec{NUM_BLOCKS - i}.bias"] = db
        carry = dblock
    d_enc[NUM_BLOCKS - 1] = d_enc[NUM_BLOCKS - 1] + carry

    # encoder chain, deep to shallow
    d_input = None
    for k in range(NUM_BLOCKS - 1, -1, -1):
        dblock = cbrr_backward(
            params.encoder[k], enc_block_caches[k], d_enc[k], grads, f"enc{k + 1}"
        )
        if k == 0:
            d_input = dblock
        elif k <= NUM_POOLS:
            unpooled = maxpool_backward(pool_indices[k - 1], dblock)
            d_enc[k - 1] = d_enc[k - 1] + unpooled
        else:
            d_enc[k - 1] = d_enc[k - 1] + dblock
    return GradStore(params=grads, d_input=d_input)


def describe(params: ModelParams, h: int = 256, w: int = 256) -> list:
    """Structural inventory: (name, kind, detail, output shape) rows for a
    nominal h x w input, without running a forward pass."""
    cfg = params.config
    rows = []
    f = cfg.filters
    sh, sw = h, w
    for i in range(NUM_BLOCKS):
        d = cfg.encoder_dilations[i]
        rows.append((f"enc{i + 1}", "block", f"3x(conv 3x3 d={d} + bn + relu)"
                     + (" + residual" if cfg.residual_enabled else ""),
                     (f[i], sh, sw)))
        if i < NUM_POOLS:
            sh //= 2
            sw //= 2
            rows.append((f"pool{i + 1}", "maxpool", "2x2 stride 2", (f[i], sh, sw)))
    for i in range(NUM_BLOCKS):
        d = cfg.decoder_dilations[i]
        if i >= NUM_BLOCKS - NUM_POOLS:
            sh *= 2
            sw *= 2
            rows.append((f"updec{NUM_BLOCKS - i}", "deconv", "3x3 stride 2",
                         (f[NUM_BLOCKS - 1 - i], sh, sw)))
        rows.append((f"dec{NUM_BLOCKS - i}", "block", f"3x(conv 3x3 d={d} + bn + relu)"
                     + (" + residual" if cfg.residual_enabled else "")
                     + f" + skip enc{NUM_BLOCKS - i}",
                     (f[NUM_BLOCKS - 1 - i], sh, sw)))
    if cfg.fusion_enabled:
        for j, s in enumerate(FUSION_STRIDES):
            ch = f[NUM_BLOCKS - 1 - j]
            rows.append((f"fup{NUM_BLOCKS - j}", "deconv",
                         f"{2 * s}x{2 * s} stride {s}", (ch, h, w)))
        rows.append(("concat", "concat", "6 pyramid scales", (sum(f), h, w)))
    rows.append(("head", "conv", "3x3 linear", (cfg.out_channels, h, w)))
    return rows


def receptive_field(depth: int, mode: str) -> int:
    """Receptive-field side length for stacked 3x3 convolutions.

    ``basic``: stride-1 undilated stacking grows linearly, R = 2*depth + 1.
    ``dilated-doubling``: dilations doubling with depth grow the field
    exponentially, R = 2**(depth + 1) - 1.
    """
    if depth < 1:
        raise ArgumentError(f"depth must be >= 1, got {depth}")
    if mode == "basic":
        return 2 * depth + 1
    if mode == "dilated-doubling":
        return 2 ** (depth + 1) - 1
    raise ArgumentError(f"unknown receptive-field mode {mode!r}")
