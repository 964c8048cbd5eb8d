"""Trajectory-conflict measurements and the mixture variance decomposition."""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import as_label_vector
from .flow import NULL_CLASS, noise_scale
from .sampler import (FlowModels, NumericalError, SamplerConfig, euler_step, guided_velocity,
                      heun_step, initial_noise)

NORM_FLOOR = 1e-12

# Reference values reported for ImageNet 256px models (baseline vs waypoint
# model). Kept for documentation and report formatting only.
REFERENCE_CONFLICT = {
    "c_pair_midpoint": {"baseline": 1.294e-4, "waypoint": 8.363e-5},
    "c_pair_peak": {"baseline": 8.532e-3, "waypoint": 5.262e-3},
    "c_rel_midpoint": {"baseline": 1.304e-2, "waypoint": 1.159e-2},
}


class UndefinedConflictError(ValueError):
    pass


def _flat(v):
    return torch.as_tensor(v).reshape(-1).double()


def pairwise_conflict(v_cond, v_alt) -> float:
    """Cosine distance ``0.5 * (1 - cos)`` between two velocity fields, in [0, 1]."""
    a, b = _flat(v_cond), _flat(v_alt)
    na, nb = float(a.norm()), float(b.norm())
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise UndefinedConflictError("velocity norm below 1e-12")
    # |a/|a| - b/|b||^2 / 4 == (1 - cos) / 2, and is exactly 0 for equal inputs
    d = float((a / na - b / nb).pow(2).sum()) / 4
    return min(max(d, 0.0), 1.0)


def cfg_rel_distance(v_cond, v_uncond) -> float:
    a, b = _flat(v_cond), _flat(v_uncond)
    na = float(a.norm())
    if na < NORM_FLOOR:
        raise UndefinedConflictError("conditional velocity norm below 1e-12")
    return float((a - b).norm()) / na


def _per_sample(fn, va, vb) -> np.ndarray:
    out = np.full(va.shape[0], np.nan)
    for i in range(va.shape[0]):
        try:
            out[i] = fn(va[i], vb[i])
        except UndefinedConflictError:
            pass
    return out


@dataclass
class ConflictTrace:
    t: np.ndarray
    c_pair_mean: np.ndarray
    c_pair_std: np.ndarray
    c_rel_mean: np.ndarray
    c_rel_std: np.ndarray
    counts: np.ndarray = field(default=None)

    @property
    def midpoint_index(self) -> int:
        return int(np.argmin(np.abs(self.t - 0.5)))

    @property
    def midpoint(self) -> dict:
        i = self.midpoint_index
        return {"t": float(self.t[i]), "c_pair": float(self.c_pair_mean[i]),
                "c_rel": float(self.c_rel_mean[i])}

    @property
    def peak(self) -> dict:
        i, j = int(np.nanargmax(self.c_pair_mean)), int(np.nanargmax(self.c_rel_mean))
        return {"c_pair": float(self.c_pair_mean[i]), "c_pair_t": float(self.t[i]),
                "c_rel": float(self.c_rel_mean[j]), "c_rel_t": float(self.t[j])}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "c_pair_mean", "c_pair_std", "c_rel_mean", "c_rel_std"])
            for k in range(len(self.t)):
                w.writerow([k, repr(float(self.t[k]))] + [
                    repr(float(a[k])) for a in
                    (self.c_pair_mean, self.c_pair_std, self.c_rel_mean, self.c_rel_std)])

    def summary(self, other: "ConflictTrace | None" = None) -> dict:
        out = {"midpoint": self.midpoint, "peak": self.peak}
        if other is not None:
            out["other"] = {"midpoint": other.midpoint, "peak": other.peak}
            # ratio > 1 means this trace conflicts less than ``other``
            out["ratio_other_over_self"] = {
                "c_pair_midpoint": _ratio(other.midpoint["c_pair"], self.midpoint["c_pair"]),
                "c_pair_peak": _ratio(other.peak["c_pair"], self.peak["c_pair"]),
                "c_rel_midpoint": _ratio(other.midpoint["c_rel"], self.midpoint["c_rel"]),
            }
        return out


def _ratio(a, b):
    return None if b == 0 else a / b


def trace_conflict(models: FlowModels, y, stride: int, num_classes: int,
                   sampler_cfg: SamplerConfig = SamplerConfig(), batches: int = 4) -> ConflictTrace:
    """Conflict metrics along sampling trajectories.

    At every step the conditional, counterfactual (``(y + stride) % C``) and
    unconditional velocities are evaluated on the same state of the
    trajectory driven by ``sampler_cfg``. Per-sample metrics are averaged
    over the batch and over ``batches`` independently seeded batches.
    """
    if num_classes < 2:
        raise ValueError("conflict tracing needs at least two classes")
    labels = as_label_vector(y, 1)
    B = labels.shape[0]
    y_alt = (labels + stride) % num_classes
    y_null = torch.full_like(labels, NULL_CLASS)
    scale = noise_scale(models.image_size) if sampler_cfg.noise_scale is None else sampler_cfg.noise_scale
    ts = sampler_cfg.schedule()
    K = sampler_cfg.steps
    pair = np.full((K, batches, B), np.nan)
    rel = np.full((K, batches, B), np.nan)
    w, interval = sampler_cfg.cfg_scale, sampler_cfg.cfg_interval

    def field_fn(zz, tt):
        return guided_velocity(models, zz, tt, labels, w, interval)

    for b in range(batches):
        z = initial_noise(B, models.image_size, sampler_cfg.seed + b * B, scale, models.dtype)
        for k in range(K):
            info = {}
            v = guided_velocity(models, z, ts[k], labels, w, interval, out=info)
            v_cond = info["v_cond"]
            v_alt, _ = models.velocity(z, ts[k], y_alt)
            v_unc = info["v_uncond"]
            if v_unc is None:
                v_unc, _ = models.velocity(z, ts[k], y_null)
            pair[k, b] = _per_sample(pairwise_conflict, v_cond, v_alt)
            rel[k, b] = _per_sample(cfg_rel_distance, v_cond, v_unc)
            if sampler_cfg.solver == "euler":
                z = euler_step(z, ts[k], ts[k + 1], v)
            else:
                z = heun_step(z, ts[k], ts[k + 1], field_fn, v_k=v)
            if not bool(torch.isfinite(z).all()):
                raise NumericalError(k)

    pair, rel = pair.reshape(K, -1), rel.reshape(K, -1)
    with np.errstate(all="ignore"):
        return ConflictTrace(
            t=np.asarray(ts[:K]),
            c_pair_mean=np.nanmean(pair, axis=1), c_pair_std=np.nanstd(pair, axis=1),
            c_rel_mean=np.nanmean(rel, axis=1), c_rel_std=np.nanstd(rel, axis=1),
            counts=np.isfinite(pair).sum(axis=1))


# --- Gaussian-mixture testbed -------------------------------------------------

@dataclass
class MixtureComponent:
    label: int
    tag: tuple
    mean: np.ndarray
    std: float


@dataclass
class MixtureSpec:
    """Isotropic Gaussian mixture whose components carry a semantic tag.

    Components sharing a tag are indistinguishable to the oracle waypoint.
    """
    components: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.components) or not self.components:
            raise ValueError("one weight per component required")
        if (self.weights <= 0).any() or abs(self.weights.sum() - 1) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        dims = {c.mean.shape for c in self.components}
        if len(dims) != 1:
            raise ValueError("component means differ in dimension")
        if any(c.std < 0 for c in self.components):
            raise ValueError("std must be nonnegative")

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        comps = []
        for c in d["components"]:
            tag = c.get("tag", c.get("label"))
            tag = tuple(np.atleast_1d(tag).tolist())
            comps.append(MixtureComponent(int(c.get("label", 0)), tag,
                                          np.atleast_1d(np.asarray(c["mean"], dtype=np.float64)),
                                          float(c["std"])))
        weights = d.get("weights") or [c["weight"] for c in d["components"]]
        return cls(comps, weights)

    def to_dict(self) -> dict:
        return {"components": [{"label": c.label, "tag": list(c.tag), "mean": c.mean.tolist(),
                                "std": c.std} for c in self.components],
                "weights": self.weights.tolist()}

    def sample(self, n: int, rng: np.random.Generator):
        k = rng.choice(len(self.components), size=n, p=self.weights)
        means = np.stack([c.mean for c in self.components])
        stds = np.array([c.std for c in self.components])
        x = means[k] + stds[k, None] * rng.standard_normal((n, self.dim))
        return k, x


BUILTIN_MIXTURES = {
    "two-point": {
        "components": [
            {"label": 0, "tag": -1, "mean": [-1.0], "std": 0.0},
            {"label": 1, "tag": 1, "mean": [1.0], "std": 0.0}],
        "weights": [0.5, 0.5]},
    "four-blob-2d": {
        "components": [
            {"label": 0, "tag": 0, "mean": [1.0, 1.0], "std": 0.3},
            {"label": 1, "tag": 0, "mean": [1.0, -1.0], "std": 0.5},
            {"label": 2, "tag": 1, "mean": [-1.0, 1.0], "std": 0.2},
            {"label": 3, "tag": 1, "mean": [-1.0, -1.0], "std": 0.4}],
        "weights": [0.1, 0.2, 0.3, 0.4]},
    "overlap-8d": {
        "components": [
            {"label": k, "tag": k % 3,
             "mean": np.round(np.sin(np.arange(8) * (k + 1) * 0.7), 6).tolist(),
             "std": 0.25 + 0.1 * k} for k in range(6)],
        "weights": [1 / 6] * 6},
}


def load_mixture(spec) -> MixtureSpec:
    """Builtin name, path to a JSON file, or a dict."""
    if isinstance(spec, MixtureSpec):
        return spec
    if isinstance(spec, dict):
        return MixtureSpec.from_dict(spec)
    if spec in BUILTIN_MIXTURES:
        return MixtureSpec.from_dict(BUILTIN_MIXTURES[spec])
    with open(spec, encoding="utf-8") as fh:
        return MixtureSpec.from_dict(json.load(fh))


def _component_posteriors(mix: MixtureSpec, z: np.ndarray, t: float):
    """Closed-form p(k | z_t), E[x | z_t, k] and tr Var(x | z_t, k).

    Given component k, x ~ N(mu_k, s_k^2 I) and z_t = t x + (1 - t) eps keep
    everything jointly Gaussian.
    """
    m = mix.dim
    mus = np.stack([c.mean for c in mix.components])            # [K, m]
    var_x = np.array([c.std ** 2 for c in mix.components])      # [K]
    var_z = t ** 2 * var_x + (1 - t) ** 2
    if (var_z <= 0).any():
        raise ValueError("z_t carries no noise at t=1 with a point-mass component")
    diff = z[:, None, :] - t * mus[None]                        # [n, K, m]
    logp = (np.log(mix.weights)[None] - 0.5 * m * np.log(2 * np.pi * var_z)[None]
            - 0.5 * (diff ** 2).sum(-1) / var_z[None])
    logp -= logp.max(axis=1, keepdims=True)
    r = np.exp(logp)
    r /= r.sum(axis=1, keepdims=True)
    gain = (t * var_x / var_z)[None, :, None]
    means = mus[None] + gain * diff                              # [n, K, m]
    tr_var = m * var_x * (1 - t) ** 2 / var_z                    # [K]
    return r, means, tr_var


def posterior_terms(mix: MixtureSpec, z: np.ndarray, t: float):
    """Per-z ``(Var(x|z), E_s[Var(x|z,s)], Var_s(E[x|z,s]))``, traces of covariances."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    r, means, tr_var = _component_posteriors(mix, z, t)
    post_mean = (r[..., None] * means).sum(1)
    total = (r * (tr_var[None] + ((means - post_mean[:, None]) ** 2).sum(-1))).sum(1)

    tags = sorted({c.tag for c in mix.components})
    within = np.zeros(len(z))
    between = np.zeros(len(z))
    for tag in tags:
        idx = [k for k, c in enumerate(mix.components) if c.tag == tag]
        p_g = r[:, idx].sum(1)
        safe = np.where(p_g > 0, p_g, 1.0)
        rg = r[:, idx] / safe[:, None]
        mean_g = (rg[..., None] * means[:, idx]).sum(1)
        var_g = (rg * (tr_var[idx][None] + ((means[:, idx] - mean_g[:, None]) ** 2).sum(-1))).sum(1)
        within += p_g * var_g
        between += p_g * ((mean_g - post_mean) ** 2).sum(-1)
    return total, within, between


def variance_decomposition(mix, t: float, num_z: int = 10_000, num_x_per_z: int = 16,
                           rng: np.random.Generator | None = None) -> dict:
    """Monte-Carlo average over z_t of the closed-form variance terms.

    Besides the three terms and the identity residual, two sampled
    cross-checks are reported: the posterior variance estimated from
    ``num_x_per_z`` draws of x | z_t, and the Bayes risk of the posterior
    mean against the x that generated each z_t.
    """
    mix = load_mixture(mix)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    _, x = mix.sample(num_z, rng)
    z = t * x + (1 - t) * rng.standard_normal(x.shape)
    total, within, between = posterior_terms(mix, z, t)
    e_std, e_or, cross = float(total.mean()), float(within.mean()), float(between.mean())
    residual = abs(e_std - (e_or + cross))

    r, means, tr_var = _component_posteriors(mix, z, t)
    post_mean = (r[..., None] * means).sum(1)
    bayes_risk = ((x - post_mean) ** 2).sum(-1)

    post_sd = np.sqrt(tr_var / mix.dim)
    mc_var = np.empty(num_z)
    if num_x_per_z > 1:
        cum = r.cumsum(1)
        u = rng.random((num_z, num_x_per_z))
        ks = np.minimum((u[..., None] > cum[:, None, :]).sum(-1), len(mix.components) - 1)
        picked = np.take_along_axis(means, ks[..., None], axis=1)          # [n, J, m]
        xs = picked + post_sd[ks][..., None] * rng.standard_normal(picked.shape)
        mc_var = ((xs - xs.mean(1, keepdims=True)) ** 2).sum(-1).sum(1) / (num_x_per_z - 1)
    else:
        mc_var[:] = np.nan

    return {
        "t": t, "num_z": num_z, "num_x_per_z": num_x_per_z,
        "e_standard": e_std, "e_oracle": e_or, "cross_term": cross,
        "identity_residual": residual,
        "identity_residual_rel": residual / e_std if e_std > 0 else 0.0,
        "contraction_holds": e_or <= e_std + 1e-9,
        "e_standard_sampled_posterior": float(np.mean(mc_var)),
        "e_standard_sampled_posterior_se": float(np.std(mc_var) / np.sqrt(num_z)),
        "bayes_risk": float(bayes_risk.mean()),
        "bayes_risk_se": float(bayes_risk.std() / np.sqrt(num_z)),
        "mixture": mix.to_dict(),
    }
