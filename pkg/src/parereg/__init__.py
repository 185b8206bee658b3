"""Rotation-equivariant point cloud registration toolkit."""

from .config import (
    AppConfig,
    AttentionConfig,
    SceneConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
)
from .errors import DegenerateGeometryError, InputError, PareRegError
from .estimator import (
    CorrespondenceSet,
    EstimatorConfig,
    Hypothesis,
    fit_rotation_from_features,
    lgr_propose,
    procrustes,
    propose_and_select,
    ransac,
    refine,
)
from .geom import (
    NeighborGraph,
    NodeGrouping,
    PointCloud,
    RigidTransform,
    Rotation,
    apply_transform,
    compose,
    farthest_point_sample,
    invert,
    knn,
    overlap_ratio,
    point_to_node_group,
    random_crop,
    random_rotation,
    voxel_downsample,
)
from .losses_metrics import (
    LossConfig,
    MetricThresholds,
    aggregate_metrics,
    contrastive_rotation_loss,
    feature_matching_recall,
    inlier_ratio,
    point_matching_loss,
    registration_recall,
    rmse,
    rotation_error,
    transformation_recall,
    translation_error,
)
from .matching import MatchHeads, PointMatches, SuperpointMatches, match_features
from .pareconv import BackboneConfig, BackboneParams, FeaturePyramid, backbone_forward, build_backbone_params
from .scenes import Scene, gen_scene
from .vn import VnInvariantHead, VnLinear, VnNonlinearity, vn_invariant, vn_linear, vn_relu
from .weights import init_pipeline_params, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "AttentionConfig",
    "BackboneConfig",
    "BackboneParams",
    "CorrespondenceSet",
    "DegenerateGeometryError",
    "EstimatorConfig",
    "FeaturePyramid",
    "Hypothesis",
    "InputError",
    "LossConfig",
    "MatchHeads",
    "MetricThresholds",
    "NeighborGraph",
    "NodeGrouping",
    "PareRegError",
    "PointCloud",
    "PointMatches",
    "RigidTransform",
    "Rotation",
    "Scene",
    "SceneConfig",
    "SuperpointMatches",
    "VnInvariantHead",
    "VnLinear",
    "VnNonlinearity",
    "aggregate_metrics",
    "apply_transform",
    "backbone_forward",
    "build_backbone_params",
    "compose",
    "config_from_dict",
    "config_to_dict",
    "contrastive_rotation_loss",
    "default_config",
    "farthest_point_sample",
    "feature_matching_recall",
    "fit_rotation_from_features",
    "gen_scene",
    "init_pipeline_params",
    "inlier_ratio",
    "invert",
    "knn",
    "lgr_propose",
    "load_config",
    "load_weights",
    "match_features",
    "overlap_ratio",
    "point_matching_loss",
    "point_to_node_group",
    "procrustes",
    "propose_and_select",
    "random_crop",
    "random_rotation",
    "ransac",
    "refine",
    "registration_recall",
    "rmse",
    "rotation_error",
    "save_weights",
    "transformation_recall",
    "translation_error",
    "vn_invariant",
    "vn_linear",
    "vn_relu",
    "voxel_downsample",
]
