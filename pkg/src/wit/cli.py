"""Command-line entry point: ``wit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
abort (non-finite values during training or sampling).
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .backbone import BackboneConfig, LabelError
from .checkpoint import CheckpointError, ConfigError, parse_config, read_checkpoint, schema_of, write_checkpoint
from .data import DataError, ToyDatasetSpec, export_image, generate_toy_dataset, load_image_folder, save_image_folder
from .diagnostics import BUILTIN_MIXTURES, UndefinedConflictError, trace_conflict, variance_decomposition
from .estimators import PixelFlowGenerator, WaypointPCA, WaypointRegressor
from .nn import DimensionError
from .sampler import NumericalError, SamplerConfig, sample
from .training import TrainConfig, models_from_checkpoint
from .waypoints import InsufficientDataError

log = logging.getLogger("wit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DataError, CheckpointError, ConfigError, DimensionError, LabelError,
               InsufficientDataError, UndefinedConflictError, OSError, json.JSONDecodeError,
               KeyError, ValueError)

WAYPOINT_MODEL_KEYS = ("depth", "hidden_dim", "heads", "mlp_ratio")
PIXEL_MODEL_KEYS = ("depth", "hidden_dim", "heads", "patch_size", "bottleneck", "mlp_ratio",
                    "waypoint_dim", "injection")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {text}")
    return v


def _interval(text):
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    if not 0.0 <= lo < hi <= 1.0:
        raise argparse.ArgumentTypeError(f"need 0 <= lo < hi <= 1, got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-toy-data", help="write the synthetic shapes dataset as an image folder")
    s.add_argument("--classes", type=_positive_int, required=True)
    s.add_argument("--size", type=_positive_int, required=True)
    s.add_argument("--per-class", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--patch-size", type=_positive_int, default=None,
                   help="patch size the images must tile (default: 8, or 4 below 32px)")
    s.add_argument("--hue-jitter", type=_nonneg_float, default=ToyDatasetSpec.hue_jitter)

    s = sub.add_parser("pca-fit", help="fit the per-patch PCA waypoint projection")
    s.add_argument("--data", required=True)
    s.add_argument("--dim", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=_positive_int, default=None, help="use at most M images")
    s.add_argument("--size", type=_positive_int, default=None)
    s.add_argument("--patch-size", type=_positive_int, default=None)
    s.add_argument("--feature-dim", type=_positive_int, default=128)
    s.add_argument("--extractor-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-waypoint-norm", action="store_true", help="keep raw PCA coordinates (no unit-variance scaling)")

    s = sub.add_parser("train-waypoints", help="stage 1: train the waypoint generator")
    s.add_argument("--data", required=True)
    s.add_argument("--proj", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-pixel", help="stage 2: train the pixel generator")
    s.add_argument("--data", required=True)
    s.add_argument("--waypoints", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--no-waypoints", action="store_true", help="train the waypoint-free baseline")

    s = sub.add_parser("sample", help="generate images by ODE integration")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="label", type=int, required=True, help="class index, -1 = unconditional")
    s.add_argument("--num", type=_positive_int, default=1)
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--solver", choices=("euler", "heun"), default="heun")
    s.add_argument("--cfg-scale", type=_nonneg_float, default=1.0)
    s.add_argument("--cfg-interval", type=_interval, default=(0.1, 1.0))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=_nonneg_float, default=None,
                   help="initial noise std (default: the value used in training)")
    s.add_argument("--out", required=True)
    s.add_argument("--trace", default=None, help="write a JSON-lines trajectory trace here")
    s.add_argument("--trace-downsample", type=int, default=0)
    s.add_argument("--raw", action="store_true", help="prefer the live weights over the EMA weights")

    s = sub.add_parser("diagnose-conflict", help="trace trajectory-conflict metrics along sampling")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ckpt-b", default=None, help="second model; the summary reports B/A ratios")
    s.add_argument("--stride", type=int, default=None, help="counterfactual label offset (default C/2)")
    s.add_argument("--out", required=True, help="CSV path; a JSON summary is written beside it")
    s.add_argument("--num", type=_positive_int, default=32, help="samples per batch")
    s.add_argument("--batches", type=_positive_int, default=4)
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--solver", choices=("euler", "heun"), default="heun")
    s.add_argument("--cfg-scale", type=_nonneg_float, default=1.0)
    s.add_argument("--cfg-interval", type=_interval, default=(0.1, 1.0))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=_nonneg_float, default=None)

    s = sub.add_parser("diagnose-variance", help="law-of-total-variance report on a Gaussian mixture")
    s.add_argument("--mixture", required=True, help=f"builtin name ({', '.join(BUILTIN_MIXTURES)}) or JSON path")
    s.add_argument("--t", type=_unit_float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num-z", type=_positive_int, default=10_000)
    s.add_argument("--num-x-per-z", type=_positive_int, default=16)
    s.add_argument("--seed", type=int, default=0)
    return p


# --- helpers ----------------------------------------------------------------

def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _sidecar(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _load_data(path, size=None):
    meta = {}
    meta_path = os.path.join(path, "config.json")
    if os.path.isfile(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh).get("spec", {})
    if size is None:
        size = meta.get("image_size")
    if size is None:
        # fall back to the shorter side of the first image found
        from PIL import Image
        for root, _, files in sorted(os.walk(path)):
            for f in sorted(files):
                if f.lower().endswith((".png", ".ppm")):
                    with Image.open(os.path.join(root, f)) as im:
                        size = min(im.size)
                    break
            if size:
                break
    if size is None:
        raise DataError(f"no images under {path}")
    return load_image_folder(path, size), meta


def _read_train_config(path, stage, model_keys):
    schema = {k: v for k, v in schema_of(TrainConfig).items() if k != "stage"}
    schema.update({f"model.{k}": t for k, t in schema_of(BackboneConfig).items() if k in model_keys})
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values = parse_config(fh.read(), schema)
    model = {k.split(".", 1)[1]: values.pop(k) for k in list(values) if k.startswith("model.")}
    return TrainConfig(stage=stage, **values), model


def _write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss", "lr", "grad_norm"])
        for h in history:
            w.writerow([h["step"], h["epoch"], repr(h["loss"]), repr(h["lr"]), repr(h["grad_norm"])])


def _noise_from_ckpt(ckpt, override):
    if override is not None:
        return override
    ns = ckpt.config["train"].get("noise_scale", -1.0)
    return None if ns < 0 else ns


# --- commands ---------------------------------------------------------------

def cmd_make_toy_data(a):
    patch = a.patch_size or (8 if a.size >= 32 else 4)
    spec = ToyDatasetSpec(num_classes=a.classes, image_size=a.size, samples_per_class=a.per_class,
                          seed=a.seed, patch_size=patch, hue_jitter=a.hue_jitter)
    ds = generate_toy_dataset(spec)
    save_image_folder(ds, a.out)
    _write_json(os.path.join(a.out, "config.json"), {"command": "make-toy-data", "spec": asdict(spec)})
    log.info("wrote %d images in %d classes to %s", len(ds), spec.num_classes, a.out)


def cmd_pca_fit(a):
    ds, meta = _load_data(a.data, a.size)
    patch = a.patch_size or meta.get("patch_size", 8)
    est = WaypointPCA(n_components=a.dim, patch_size=patch, feature_dim=a.feature_dim,
                      extractor_seed=a.extractor_seed, normalize=not a.no_waypoint_norm,
                      max_samples=a.samples, random_state=a.seed)
    est.fit(ds.images)
    ck = est.to_checkpoint()
    ck.config["data"] = os.path.abspath(a.data)
    write_checkpoint(a.out, ck)
    ev = est.explained_variance_
    log.info("fitted %d components on %d images; leading variances %s", a.dim, est.n_samples_seen_,
             np.array2string(ev[:4], precision=4))


def cmd_train_waypoints(a):
    ds, _ = _load_data(a.data)
    pca = WaypointPCA.from_checkpoint(read_checkpoint(a.proj))
    if pca.image_size_ != ds.image_size:
        raise DimensionError(f"projection was fitted on {pca.image_size_}px images, data is {ds.image_size}px")
    cfg, model = _read_train_config(a.config, "waypoints", WAYPOINT_MODEL_KEYS)
    est = WaypointRegressor(pca=pca, num_classes=ds.num_classes, train_config=cfg, **model)
    est.fit(ds.images, ds.labels)
    ck = est.to_checkpoint()
    ck.config["data"] = os.path.abspath(a.data)
    write_checkpoint(a.out, ck)
    _write_history(_sidecar(a.out, ".log.csv"), est.state_.history)
    log.info("trained waypoint generator for %d steps -> %s", est.state_.step, a.out)


def cmd_train_pixel(a):
    if a.no_waypoints == (a.waypoints is not None):
        raise UsageError("train-pixel: give exactly one of --waypoints CKPT or --no-waypoints")
    ds, _ = _load_data(a.data)
    cfg, model = _read_train_config(a.config, "pixel", PIXEL_MODEL_KEYS)
    wp = None
    if a.waypoints is not None:
        wp = WaypointRegressor.from_checkpoint(read_checkpoint(a.waypoints))
        if wp.model_config_.image_size != ds.image_size:
            raise DimensionError("waypoint generator image size does not match the data")
        for key in ("patch_size", "waypoint_dim"):
            want = getattr(wp.model_config_, key)
            if model.get(key, want) != want:
                raise DimensionError(f"model.{key}={model[key]} conflicts with the waypoint generator ({want})")
            model.pop(key, None)
    est = PixelFlowGenerator(waypoints=wp, num_classes=ds.num_classes, train_config=cfg, **model)
    est.fit(ds.images, ds.labels)
    ck = est.to_checkpoint()
    ck.config["data"] = os.path.abspath(a.data)
    write_checkpoint(a.out, ck)
    _write_history(_sidecar(a.out, ".log.csv"), est.state_.history)
    log.info("trained pixel generator (%s) for %d steps -> %s",
             "waypoints" if wp else "baseline", est.state_.step, a.out)


def cmd_sample(a):
    ck = read_checkpoint(a.ckpt)
    models = models_from_checkpoint(ck, use_ema=not a.raw)
    cfg = SamplerConfig(steps=a.steps, solver=a.solver, cfg_scale=a.cfg_scale, cfg_interval=a.cfg_interval,
                        seed=a.seed, noise_scale=_noise_from_ckpt(ck, a.noise_scale))
    images, record = sample(models, a.label, cfg, num=a.num, trace=a.trace is not None)
    os.makedirs(a.out, exist_ok=True)
    width = max(4, len(str(a.num)))
    for i, img in enumerate(images.numpy()):
        export_image(img, os.path.join(a.out, f"{i:0{width}d}.png"))
    _write_json(os.path.join(a.out, "config.json"), {
        "command": "sample", "ckpt": os.path.abspath(a.ckpt), "class": a.label, "num": a.num,
        "use_ema": not a.raw, "sampler": asdict(cfg), "model": ck.config["model"]})
    if a.trace is not None:
        record.write_jsonl(a.trace, a.trace_downsample)
    log.info("wrote %d samples of class %d to %s", a.num, a.label, a.out)


def cmd_diagnose_conflict(a):
    ck_a = read_checkpoint(a.ckpt)
    C = ck_a.config["model"]["num_classes"]
    stride = C // 2 if a.stride is None else a.stride
    labels = np.arange(a.num) % C

    def run(ck):
        cfg = SamplerConfig(steps=a.steps, solver=a.solver, cfg_scale=a.cfg_scale,
                            cfg_interval=a.cfg_interval, seed=a.seed,
                            noise_scale=_noise_from_ckpt(ck, a.noise_scale))
        return trace_conflict(models_from_checkpoint(ck), labels, stride, C, cfg, a.batches), cfg

    tr_a, cfg_a = run(ck_a)
    tr_b = None
    if a.ckpt_b is not None:
        ck_b = read_checkpoint(a.ckpt_b)
        if ck_b.config["model"]["num_classes"] != C:
            raise DimensionError("the two checkpoints have different class counts")
        tr_b, _ = run(ck_b)
    tr_a.write_csv(a.out)
    summary = {"command": "diagnose-conflict", "ckpt": os.path.abspath(a.ckpt), "stride": stride,
               "num_classes": C, "num_per_batch": a.num, "batches": a.batches,
               "sampler": asdict(cfg_a), **tr_a.summary(tr_b)}
    if tr_b is not None:
        b_csv = _sidecar(a.out, ".b.csv")
        tr_b.write_csv(b_csv)
        summary.update(ckpt_b=os.path.abspath(a.ckpt_b), csv_b=b_csv)
    _write_json(_sidecar(a.out, ".json"), summary)
    log.info("midpoint c_pair %.4g, peak c_pair %.4g", tr_a.midpoint["c_pair"], tr_a.peak["c_pair"])


def cmd_diagnose_variance(a):
    rep = variance_decomposition(a.mixture, a.t, a.num_z, a.num_x_per_z, np.random.default_rng(a.seed))
    _write_json(a.out, {"command": "diagnose-variance", "mixture_arg": a.mixture, "seed": a.seed, **rep})
    log.info("E_standard %.6g  E_oracle %.6g  cross %.6g  residual %.3g", rep["e_standard"],
             rep["e_oracle"], rep["cross_term"], rep["identity_residual"])


COMMANDS = {
    "make-toy-data": cmd_make_toy_data, "pca-fit": cmd_pca_fit,
    "train-waypoints": cmd_train_waypoints, "train-pixel": cmd_train_pixel, "sample": cmd_sample,
    "diagnose-conflict": cmd_diagnose_conflict, "diagnose-variance": cmd_diagnose_variance,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:        # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"wit: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"wit: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())
