"""Desk-scale comparison of the waypoint model against the waypoint-free
baseline: sample-quality curves during training and conflict traces of the
final models."""
import logging
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import ToyDatasetSpec, generate_toy_dataset
from .diagnostics import trace_conflict
from .estimators import PixelFlowGenerator, WaypointPCA, WaypointRegressor
from .quality import ToyClassifier
from .sampler import FlowModels, SamplerConfig, sample
from .training import TrainConfig, frozen_copy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    num_classes: int = 4
    image_size: int = 16
    patch_size: int = 4
    samples_per_class: int = 128
    data_seed: int = 1
    feature_dim: int = 64
    waypoint_dim: int = 8
    wp_depth: int = 2
    wp_hidden: int = 64
    wp_steps: int = 1500
    depth: int = 2
    hidden_dim: int = 64
    heads: int = 4
    bottleneck: int = 32
    pixel_steps: int = 2000
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_epochs: float = 1.0
    ema_decay: float = 0.995
    noise_scale: float = 1.0
    eval_every: int = 250
    eval_samples: int = 256
    eval_steps: int = 20
    conflict_num: int = 32
    conflict_batches: int = 2
    conflict_steps: int = 50
    classifier_seed: int = 99
    classifier_per_class: int = 256

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, base_lr=self.base_lr,
                           warmup_epochs=self.warmup_epochs, ema_decay=self.ema_decay,
                           noise_scale=self.noise_scale, seed=seed, log_every=0)

    def dataset_spec(self, seed: int, per_class: int) -> ToyDatasetSpec:
        return ToyDatasetSpec(num_classes=self.num_classes, image_size=self.image_size,
                              samples_per_class=per_class, seed=seed, patch_size=self.patch_size)


def fit_classifier(p: DeskProtocol):
    """Quality classifier on an independent draw of the toy set, plus its
    accuracy on a second held-out draw."""
    clf = ToyClassifier().fit(generate_toy_dataset(p.dataset_spec(p.classifier_seed, p.classifier_per_class)))
    held = generate_toy_dataset(p.dataset_spec(p.classifier_seed + 1, 64))
    return clf, clf.accuracy(held.images, held.labels)


def sample_quality(models: FlowModels, clf: ToyClassifier, p: DeskProtocol, seed: int) -> float:
    y = np.arange(p.eval_samples) % p.num_classes
    cfg = SamplerConfig(steps=p.eval_steps, solver="heun", seed=seed, noise_scale=p.noise_scale)
    images, _ = sample(models, y, cfg, trace=False)
    return clf.accuracy(images.numpy(), y)


def run_seed(p: DeskProtocol, seed: int, clf: ToyClassifier) -> dict:
    """Train both models with identical seed, steps and architecture; record
    quality every ``eval_every`` steps and the final conflict traces."""
    ds = generate_toy_dataset(p.dataset_spec(p.data_seed, p.samples_per_class))
    cfg = p.train_config(seed)
    pca = WaypointPCA(n_components=p.waypoint_dim, patch_size=p.patch_size, feature_dim=p.feature_dim)
    pca.fit(ds.images)
    t0 = time.time()
    wp = WaypointRegressor(pca, depth=p.wp_depth, hidden_dim=p.wp_hidden, heads=p.heads,
                           train_config=cfg, steps=p.wp_steps).fit(ds.images, ds.labels)
    out = {"seed": seed, "wp_seconds": time.time() - t0,
           "wp_loss_start": float(np.mean([h["loss"] for h in wp.state_.history[:50]])),
           "wp_loss_end": float(np.mean([h["loss"] for h in wp.state_.history[-50:]]))}
    eval_seed = 10_000 + 1_000 * seed
    for name, waypoints in (("wit", wp), ("baseline", None)):
        curve = []

        def probe(state, waypoints=waypoints, curve=curve):
            if state.step % p.eval_every == 0:
                net = waypoints.net_ if waypoints is not None else None
                models = FlowModels(frozen_copy(state.net, state.ema), net)
                curve.append((state.step, sample_quality(models, clf, p, eval_seed)))

        t0 = time.time()
        gen = PixelFlowGenerator(waypoints, depth=p.depth, hidden_dim=p.hidden_dim, heads=p.heads,
                                 patch_size=p.patch_size, bottleneck=p.bottleneck,
                                 waypoint_dim=p.waypoint_dim, train_config=replace(cfg, stage="pixel"),
                                 steps=p.pixel_steps)
        gen.fit(ds.images, ds.labels, callback=probe)
        conflict = trace_conflict(
            gen.models_, np.arange(p.conflict_num) % p.num_classes, p.num_classes // 2, p.num_classes,
            SamplerConfig(steps=p.conflict_steps, solver="heun", seed=eval_seed, noise_scale=p.noise_scale),
            batches=p.conflict_batches)
        out[name] = {
            "steps": [s for s, _ in curve], "quality": [q for _, q in curve],
            "loss_end": float(np.mean([h["loss"] for h in gen.state_.history[-50:]])),
            "peak": conflict.peak, "midpoint": conflict.midpoint,
            "c_pair_curve": conflict.c_pair_mean.tolist(), "seconds": time.time() - t0}
        log.info("seed %d %s: quality %s peak c_pair %.4g", seed, name,
                 np.round(out[name]["quality"], 3).tolist(), conflict.peak["c_pair"])
    return out


def steps_to_reach(steps, quality, level) -> float:
    """First evaluated step whose quality is at least ``level`` (inf if none)."""
    for s, q in zip(steps, quality):
        if q >= level:
            return float(s)
    return float("inf")


def summarize(runs: list) -> dict:
    steps = runs[0]["baseline"]["steps"]
    q_wit = np.mean([r["wit"]["quality"] for r in runs], axis=0)
    q_base = np.mean([r["baseline"]["quality"] for r in runs], axis=0)
    target = float(q_base[-1])
    reach = steps_to_reach(steps, q_wit, target)
    peak_wit = float(np.mean([r["wit"]["peak"]["c_pair"] for r in runs]))
    peak_base = float(np.mean([r["baseline"]["peak"]["c_pair"] for r in runs]))
    return {
        "steps": steps, "quality_wit": q_wit.tolist(), "quality_baseline": q_base.tolist(),
        "baseline_final_quality": target, "wit_steps_to_baseline_final": reach,
        "step_ratio": reach / steps[-1],
        "peak_c_pair_wit": peak_wit, "peak_c_pair_baseline": peak_base,
        "peak_reduction": 1 - peak_wit / peak_base,
        "midpoint_c_pair_wit": float(np.mean([r["wit"]["midpoint"]["c_pair"] for r in runs])),
        "midpoint_c_pair_baseline": float(np.mean([r["baseline"]["midpoint"]["c_pair"] for r in runs])),
    }


def run_comparison(p: DeskProtocol = DeskProtocol(), seeds=(0, 1, 2)) -> dict:
    clf, clf_acc = fit_classifier(p)
    runs = [run_seed(p, s, clf) for s in seeds]
    return {"protocol": asdict(p), "classifier_heldout_accuracy": clf_acc, "runs": runs,
            "summary": summarize(runs)}
