"""Run configuration: presets, JSON load/merge, and the emitted config view.

A config file is a single JSON document. Any subset of the sections below may
appear; missing values come from the chosen preset. The published defaults are
always emitted under "paper_defaults" so a report records what it ran with.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import InputError
from .estimator import EstimatorConfig
from .io import read_json
from .losses_metrics import LossConfig, MetricThresholds
from .pareconv import BackboneConfig

PRESETS = ("indoor", "outdoor")
GENERATORS = ("plane-grid", "box-room", "random-surface")


@dataclass(frozen=True)
class AttentionConfig:
    width: int = 192
    out_width: int = 192
    rounds: int = 3
    heads: int = 4
    n_buckets: int = 8
    bucket_size: float = 0.5

    def __post_init__(self):
        if self.rounds < 1 or self.heads < 1 or self.n_buckets < 1:
            raise InputError("attention sizes must be positive")
        if self.width % self.heads:
            raise InputError("head count must divide the attention width")
        if self.bucket_size <= 0:
            raise InputError("bucket size must be positive")


@dataclass(frozen=True)
class SceneConfig:
    generator: str = "box-room"
    n_points: int = 1200
    overlap: float = 0.5
    noise_sigma: float = 0.005
    crop_ratio: float = 0.3

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InputError(f"generator must be one of {GENERATORS}")
        if self.n_points <= 0:
            raise InputError("point count must be positive")
        if not 0.0 < self.overlap <= 1.0:
            raise InputError("overlap target must lie in (0, 1]")
        if self.noise_sigma < 0 or not 0.0 <= self.crop_ratio < 1.0:
            raise InputError("bad noise or crop ratio")


@dataclass(frozen=True)
class AppConfig:
    preset: str
    backbone: BackboneConfig
    attention: AttentionConfig
    estimator: EstimatorConfig
    thresholds: MetricThresholds
    loss: LossConfig
    scene: SceneConfig
    n_coarse: int = 256
    n_fine: int = 1000

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InputError(f"preset must be one of {PRESETS}")
        if self.n_coarse < 1 or self.n_fine < 1:
            raise InputError("correspondence budgets must be positive")

    @property
    def d_super(self) -> int:
        return 3 * self.backbone.stage_channels[-1]

    @property
    def d_point(self) -> int:
        return 3 * self.backbone.decoder_channels[-1]


def default_config(preset: str = "indoor") -> AppConfig:
    if preset == "indoor":
        return AppConfig(
            preset="indoor",
            backbone=BackboneConfig(),
            attention=AttentionConfig(),
            estimator=EstimatorConfig(),
            thresholds=MetricThresholds(),
            loss=LossConfig(),
            scene=SceneConfig(),
        )
    if preset == "outdoor":
        return AppConfig(
            preset="outdoor",
            backbone=BackboneConfig(
                voxel=0.3,
                ratio=2.5,
                stage_channels=(16, 32, 64),
                decoder_channels=(32, 21),
            ),
            attention=AttentionConfig(width=96, out_width=128, bucket_size=5.0),
            estimator=EstimatorConfig(tau_d=0.6),
            thresholds=MetricThresholds(tau_r_deg=5.0, tau_t=2.0),
            loss=LossConfig(),
            scene=SceneConfig(noise_sigma=0.01, n_points=2000, generator="random-surface"),
        )
    raise InputError(f"preset must be one of {PRESETS}")


def config_to_dict(cfg: AppConfig) -> dict:
    b = cfg.backbone
    return {
        "preset": cfg.preset,
        "paper_defaults": {
            "acceptance_radius": cfg.estimator.tau_d,
            "crop_ratio": cfg.scene.crop_ratio,
            "gaussian_noise": cfg.scene.noise_sigma,
            "n_coarse": cfg.n_coarse,
            "n_fine": cfg.n_fine,
            "nearest_neighbors": b.k,
            "voxel": b.voxel,
            "weight_matrices": b.kernels,
        },
        "backbone": {
            "voxel": b.voxel,
            "k": b.k,
            "ratio": b.ratio,
            "kernels": b.kernels,
            "mode": b.mode,
            "stage_channels": list(b.stage_channels),
            "decoder_channels": list(b.decoder_channels),
            "corr_vn_channels": list(b.corr_vn_channels),
            "corr_mlp_hidden": list(b.corr_mlp_hidden),
        },
        "attention": {
            "width": cfg.attention.width,
            "out_width": cfg.attention.out_width,
            "rounds": cfg.attention.rounds,
            "heads": cfg.attention.heads,
            "n_buckets": cfg.attention.n_buckets,
            "bucket_size": cfg.attention.bucket_size,
        },
        "estimator": {
            "tau_d": cfg.estimator.tau_d,
            "refine_iterations": cfg.estimator.refine_iterations,
            "ransac_sample": cfg.estimator.ransac_sample,
            "budget": cfg.estimator.budget,
        },
        "thresholds": {
            "tau_ir": cfg.thresholds.tau_ir,
            "tau_fmr": cfg.thresholds.tau_fmr,
            "tau_rr": cfg.thresholds.tau_rr,
            "tau_r_deg": cfg.thresholds.tau_r_deg,
            "tau_t": cfg.thresholds.tau_t,
        },
        "loss": {
            "alpha": cfg.loss.alpha,
            "beta": cfg.loss.beta,
            "d_p": cfg.loss.d_p,
            "d_n": cfg.loss.d_n,
        },
        "scene": {
            "generator": cfg.scene.generator,
            "n_points": cfg.scene.n_points,
            "overlap": cfg.scene.overlap,
            "noise_sigma": cfg.scene.noise_sigma,
            "crop_ratio": cfg.scene.crop_ratio,
        },
        "matching": {"n_coarse": cfg.n_coarse, "n_fine": cfg.n_fine},
    }


def _merge_section(obj: dict, section: str, allowed: dict) -> dict:
    """Pick overrides for one section, rejecting unknown keys early."""
    raw = obj.get(section, {})
    if not isinstance(raw, dict):
        raise InputError(f"config section '{section}' must be an object")
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise InputError(f"unknown config key '{section}.{key}'")
        cast = allowed[key]
        try:
            out[key] = cast(value)
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad value for '{section}.{key}': {exc}") from exc
    return out


def _int_tuple(v):
    return tuple(int(x) for x in v)


def config_from_dict(obj: dict) -> AppConfig:
    if not isinstance(obj, dict):
        raise InputError("config document must be a JSON object")
    known = {
        "preset",
        "paper_defaults",
        "backbone",
        "attention",
        "estimator",
        "thresholds",
        "loss",
        "scene",
        "matching",
    }
    for key in obj:
        if key not in known:
            raise InputError(f"unknown config key '{key}'")
    preset = obj.get("preset", "indoor")
    if preset not in PRESETS:
        raise InputError(f"preset must be one of {PRESETS}")
    cfg = default_config(preset)

    # Table-5 values can be overridden as a group; specific sections win below.
    paper = _merge_section(
        obj,
        "paper_defaults",
        {
            "acceptance_radius": float,
            "crop_ratio": float,
            "gaussian_noise": float,
            "n_coarse": int,
            "n_fine": int,
            "nearest_neighbors": int,
            "voxel": float,
            "weight_matrices": int,
        },
    )
    backbone_over = _merge_section(
        obj,
        "backbone",
        {
            "voxel": float,
            "k": int,
            "ratio": float,
            "kernels": int,
            "mode": str,
            "stage_channels": _int_tuple,
            "decoder_channels": _int_tuple,
            "corr_vn_channels": _int_tuple,
            "corr_mlp_hidden": _int_tuple,
        },
    )
    if "voxel" in paper:
        backbone_over.setdefault("voxel", paper["voxel"])
    if "nearest_neighbors" in paper:
        backbone_over.setdefault("k", paper["nearest_neighbors"])
    if "weight_matrices" in paper:
        backbone_over.setdefault("kernels", paper["weight_matrices"])
    backbone = replace(cfg.backbone, **backbone_over) if backbone_over else cfg.backbone

    attention_over = _merge_section(
        obj,
        "attention",
        {
            "width": int,
            "out_width": int,
            "rounds": int,
            "heads": int,
            "n_buckets": int,
            "bucket_size": float,
        },
    )
    attention = replace(cfg.attention, **attention_over) if attention_over else cfg.attention

    estimator_over = _merge_section(
        obj,
        "estimator",
        {"tau_d": float, "refine_iterations": int, "ransac_sample": int, "budget": int},
    )
    if "acceptance_radius" in paper:
        estimator_over.setdefault("tau_d", paper["acceptance_radius"])
    estimator = replace(cfg.estimator, **estimator_over) if estimator_over else cfg.estimator

    thresholds_over = _merge_section(
        obj,
        "thresholds",
        {"tau_ir": float, "tau_fmr": float, "tau_rr": float, "tau_r_deg": float, "tau_t": float},
    )
    thresholds = replace(cfg.thresholds, **thresholds_over) if thresholds_over else cfg.thresholds

    loss_over = _merge_section(
        obj, "loss", {"alpha": float, "beta": float, "d_p": float, "d_n": float}
    )
    loss = replace(cfg.loss, **loss_over) if loss_over else cfg.loss

    scene_over = _merge_section(
        obj,
        "scene",
        {
            "generator": str,
            "n_points": int,
            "overlap": float,
            "noise_sigma": float,
            "crop_ratio": float,
        },
    )
    if "gaussian_noise" in paper:
        scene_over.setdefault("noise_sigma", paper["gaussian_noise"])
    if "crop_ratio" in paper:
        scene_over.setdefault("crop_ratio", paper["crop_ratio"])
    scene = replace(cfg.scene, **scene_over) if scene_over else cfg.scene

    matching_over = _merge_section(obj, "matching", {"n_coarse": int, "n_fine": int})
    n_coarse = matching_over.get("n_coarse", paper.get("n_coarse", cfg.n_coarse))
    n_fine = matching_over.get("n_fine", paper.get("n_fine", cfg.n_fine))

    return AppConfig(
        preset=preset,
        backbone=backbone,
        attention=attention,
        estimator=estimator,
        thresholds=thresholds,
        loss=loss,
        scene=scene,
        n_coarse=n_coarse,
        n_fine=n_fine,
    )


def load_config(path=None, preset: str = "indoor") -> AppConfig:
    if path is None:
        return default_config(preset)
    obj = read_json(path)
    if isinstance(obj, dict) and "preset" not in obj:
        obj = dict(obj, preset=preset)
    return config_from_dict(obj)
