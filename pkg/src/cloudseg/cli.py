"""Command-line interface covering the full workflow.

Subcommands: synth (generate toy scenes), train, predict, evaluate,
gradcheck, and describe. Every option can come from a JSON config document
(``--config``) and be overridden by a matching command-line flag; unknown
keys in the config are rejected up front. Exit codes: 0 success, 2 config
error, 3 I/O error, 4 numerical failure, 5 internal contract violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint, formats, gradcheck, metrics, synthetic
from .errors import (
    ArgumentError,
    ConfigError,
    ContractError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .network import (
    NetworkConfig,
    count_parameters,
    describe,
    named_tensors,
    receptive_field,
)
from .pipeline import InferenceConfig, linear_stretch, normalize_max, predict_image
from .training import TrainConfig, curve_log_lines, train


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_ints(text):
    if isinstance(text, int):
        return text
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    parts = str(text).split(",")
    vals = [int(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


def _parse_floats(text):
    if isinstance(text, (int, float)):
        return float(text)
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    vals = [float(p) for p in str(text).split(",")]
    return vals[0] if len(vals) == 1 else vals


def _parse_pair(text):
    v = _parse_floats(text)
    if not isinstance(v, list) or len(v) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {text!r}")
    return tuple(v)


def _parse_int_pair(text):
    v = _parse_ints(text)
    if not isinstance(v, list) or len(v) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {text!r}")
    return tuple(v)


NETWORK_KEYS = {
    "in_channels": int,
    "filters": _parse_ints,
    "encoder_dilations": _parse_ints,
    "decoder_dilations": _parse_ints,
    "fusion_enabled": _parse_bool,
    "residual_enabled": _parse_bool,
    "out_channels": int,
}
TRAIN_KEYS = {
    "lr0": float,
    "max_iter": int,
    "poly_power": float,
    "batch_size": int,
    "clip_norm": float,
    "momentum": float,
    "seed": int,
    "checkpoint_every": int,
    "eval_every": int,
    "loss_reduction": str,
}
INFER_KEYS = {
    "threshold": float,
    "patch": int,
    "min_overlap": int,
}
SCENE_KEYS = {
    "height": int,
    "width": int,
    "bands": int,
    "cloud_count": _parse_int_pair,
    "cloud_radius": _parse_pair,
    "shadow_offset": _parse_int_pair,
    "cloud_brightness": _parse_pair,
    "background_range": _parse_pair,
    "texture_scale": float,
    "shadow_depth": float,
    "edge_sharpness": float,
    "seed": int,
    "n_scenes": int,
}


def load_config(args, key_types: dict) -> dict:
    """Merge the JSON config (if given) with CLI overrides; reject unknowns."""
    merged = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        unknown = set(doc) - set(key_types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(doc)
    for key in key_types:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    out = {}
    for key, value in merged.items():
        try:
            out[key] = key_types[key](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return out


def _pick(cfg: dict, keys) -> dict:
    return {k: cfg[k] for k in keys if k in cfg}


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(**_pick(cfg, [k for k in NETWORK_KEYS]))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**_pick(cfg, [k for k in TRAIN_KEYS]))


def inference_config(cfg: dict, args=None) -> InferenceConfig:
    kw = _pick(cfg, [k for k in INFER_KEYS])
    if args is not None:
        if getattr(args, "threshold", None) is not None:
            kw["threshold"] = args.threshold
        if getattr(args, "patch", None) is not None:
            kw["patch"] = args.patch
        if getattr(args, "overlap", None) is not None:
            kw["min_overlap"] = args.overlap
    return InferenceConfig(**kw)


def scene_spec(cfg: dict) -> synthetic.SceneSpec:
    keys = [k for k in SCENE_KEYS if k not in ("n_scenes",)]
    return synthetic.SceneSpec(**_pick(cfg, keys))


def _add_keys(parser, key_types, skip=()):
    for key, conv in key_types.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, default=None, metavar="V",
                            help=f"override config key {key}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args, SCENE_KEYS)
    spec = scene_spec(cfg)
    n = int(cfg.get("n_scenes", 20))
    seed = int(cfg.get("seed", 0))
    n_train = synthetic.train_split(n)
    for sub in ("train", "val"):
        os.makedirs(os.path.join(args.out_dir, sub), exist_ok=True)
    for i, image, mask in synthetic.iter_scenes(n, spec, seed):
        sub = "train" if i < n_train else "val"
        stem = os.path.join(args.out_dir, sub, f"scene_{i:03d}")
        formats.write_rsb(stem + ".rsb", image.values, "f32")
        formats.write_mask(stem + "_mask.pgm", mask)
    print(f"wrote {n_train} training and {n - n_train} validation scenes "
          f"to {args.out_dir}")
    return 0


def _load_samples(directory) -> list:
    names = sorted(f for f in os.listdir(directory) if f.endswith(".rsb"))
    samples = []
    for name in names:
        stem = name[:-len(".rsb")]
        image = formats.read_rsb(os.path.join(directory, name))
        mask = formats.read_mask(os.path.join(directory, stem + "_mask.pgm"))
        image = normalize_max(image)
        samples.append(synthetic.scene_to_sample(image, mask))
    if not samples:
        raise ConfigError(f"no .rsb scenes found in {directory}")
    return samples


def cmd_train(args) -> int:
    cfg = load_config(args, {**NETWORK_KEYS, **TRAIN_KEYS})
    ncfg = network_config(cfg)
    tcfg = train_config(cfg)
    train_samples = _load_samples(os.path.join(args.data_dir, "train"))
    val_dir = os.path.join(args.data_dir, "val")
    val_samples = _load_samples(val_dir) if os.path.isdir(val_dir) else []
    bands = train_samples[0][0].shape[1]
    if bands != ncfg.in_channels:
        raise ConfigError(
            f"scenes have {bands} bands but in_channels is {ncfg.in_channels}"
        )

    def save_intermediate(iteration, params):
        checkpoint.save_params(params, f"{args.out}.iter{iteration + 1:06d}")

    params, curves = train(ncfg, tcfg, train_samples, val_samples,
                           checkpoint_callback=save_intermediate)
    checkpoint.save_params(params, args.out)
    curve_path = args.curves or args.out + ".curves.tsv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(curve_log_lines(curves)) + "\n")
    final = curves[-1]
    msg = f"trained {tcfg.max_iter} iterations, final loss {final['loss']:.6g}"
    if "val_f1" in final and final["val_f1"] is not None:
        msg += f", val cloud F1 {final['val_f1']:.4f}"
    print(msg)
    print(f"checkpoint: {args.out}\ncurves: {curve_path}")
    return 0


def _parse_stretch(text, bands):
    pairs = text.split(",")
    if len(pairs) != bands:
        raise ConfigError(f"--stretch needs {bands} gain:offset pairs, got {len(pairs)}")
    gains, offsets = [], []
    for p in pairs:
        try:
            g, o = p.split(":")
            gains.append(float(g))
            offsets.append(float(o))
        except ValueError as exc:
            raise ConfigError(f"bad --stretch entry {p!r} (want gain:offset)") from exc
    return gains, offsets


def cmd_predict(args) -> int:
    cfg = load_config(args, INFER_KEYS)
    icfg = inference_config(cfg, args)
    params = checkpoint.load_params(args.checkpoint)
    image = formats.read_rsb(args.image)
    if args.stretch:
        gains, offsets = _parse_stretch(args.stretch, image.bands)
        image = linear_stretch(normalize_max(image), gains, offsets)
        normalize = False
    else:
        normalize = True
    mask, raw = predict_image(params, image, icfg, normalize=normalize,
                              threads=args.threads)
    formats.write_mask(args.out_mask, mask)
    raw_path = args.raw_out or os.path.splitext(args.out_mask)[0] + ".maps.rsb"
    formats.write_rsb(raw_path, raw.astype(np.float32), "f32")
    counts = {v: int((mask.labels == v).sum()) for v in (255, 128, 0)}
    print(f"mask: {args.out_mask} (cloud {counts[255]}, shadow {counts[128]}, "
          f"clear {counts[0]} px)\nraw maps: {raw_path}")
    return 0


def cmd_evaluate(args) -> int:
    pred = formats.read_mask(args.pred)
    ref = formats.read_mask(args.ref)
    if pred.labels.shape != ref.labels.shape:
        raise ConfigError(
            f"mask shapes differ: {pred.labels.shape} vs {ref.labels.shape}"
        )
    classes = ("cloud", "shadow") if args.cls == "both" else (args.cls,)
    report = metrics.metric_report(pred, ref, classes)
    strata = None
    if args.strata:
        strata_img = formats.read_rsb(args.strata)
        plane = strata_img.values[0].astype(np.uint8)
        strata = metrics.stratified_accuracy(pred, ref, plane, classes)
    if args.json:
        print(metrics.report_json(report, strata))
    else:
        print(metrics.report_text(report, strata))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_checks(args.layer)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok = ok and r.passed
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  < {r.tolerance:.0e}  {status}")
    if not ok:
        raise NumericalError("gradient check failed")
    return 0


def cmd_describe(args) -> int:
    cfg = load_config(args, NETWORK_KEYS)
    ncfg = network_config(cfg)
    from .network import build_model

    params = build_model(ncfg, seed=0)
    print(f"network for {ncfg.in_channels}-band input, filters {ncfg.filters}")
    print(f"{'stage':10s} {'kind':8s} {'output (c,h,w)':>18s}  detail")
    for name, kind, detail, shape in describe(params):
        print(f"{name:10s} {kind:8s} {str(shape):>18s}  {detail}")
    learnable, total = count_parameters(params)
    print(f"learnable parameters: {learnable}")
    print(f"checkpoint elements:  {total}")
    print("receptive field (3x3 kernels):")
    print("depth  basic  dilated-doubling")
    for d in range(1, 7):
        print(f"{d:5d}  {receptive_field(d, 'basic'):5d}  "
              f"{receptive_field(d, 'dilated-doubling'):16d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudseg",
        description="cloud / cloud-shadow segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes with ground truth")
    p.add_argument("out_dir", help="output directory (train/ and val/ created)")
    p.add_argument("--config", help="JSON config document")
    _add_keys(p, SCENE_KEYS)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a scene directory")
    p.add_argument("data_dir", help="directory with train/ (and optional val/)")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--curves", help="curve log path (default: <out>.curves.tsv)")
    _add_keys(p, NETWORK_KEYS)
    _add_keys(p, TRAIN_KEYS)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict a mask for a whole scene")
    p.add_argument("checkpoint")
    p.add_argument("image", help="input .rsb raster")
    p.add_argument("out_mask", help="output mask .pgm")
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--stretch", help="per-band gain:offset pairs, comma separated")
    p.add_argument("--raw-out", dest="raw_out", help="raw maps .rsb path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="score a predicted mask against a reference")
    p.add_argument("pred", help="predicted mask .pgm")
    p.add_argument("ref", help="reference mask .pgm")
    p.add_argument("--strata", help="land-cover stratum raster (.rsb, byte)")
    p.add_argument("--class", dest="cls", choices=("cloud", "shadow", "both"),
                   default="both")
    p.add_argument("--json", action="store_true", help="emit the JSON report")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--layer", default="all",
                   choices=("all",) + tuple(gradcheck.LAYER_CHECKS))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("describe", help="print the layer inventory and receptive fields")
    p.add_argument("--config", help="JSON config document")
    _add_keys(p, NETWORK_KEYS)
    p.set_defaults(fn=cmd_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ArgumentError as exc:
        print(f"error: argument: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 4
    except (ShapeError, ContractError) as exc:
        print(f"error: contract: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
