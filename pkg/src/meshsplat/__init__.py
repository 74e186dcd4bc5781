"""Mesh-anchored 2D Gaussian surfel avatars.

A rigged template mesh anchors a UV map of Gaussian surfels. A
conditioning network predicts the surfel parameters from texture,
geometry, and a driving signal; a differentiable rasterizer composites
them front to back. Few-shot test-time adaptation fine-tunes the
network on a handful of real frames, optionally mixed with enhanced
self-rendered supervision.
"""

from .adaptation import (AdaptationConfig, Adapter, EnhancerHandle,
                         IdentityEnhancer, OracleEnhancer, RemoteEnhancer,
                         adapt_stage1, adapt_stage2, generate_supervision,
                         sample_novel_conditions)
from .bench import (BenchmarkConfig, canonical_conditioning,
                    load_bench_manifest, make_synthetic_benchmark)
from .config import (EnhancerSpec, InitSpec, PriorHyper, RendererSpec,
                     RunConfig, load_run_config, parse_run_config)
from .dataset import (AvatarDataset, FrameRecord, dataset_to_json,
                      load_dataset, load_train_samples, save_dataset)
from .errors import (ConfigError, ContractError, DatasetError,
                     EnhancerError, LockError, MeshsplatError,
                     TrainingDivergedError)
from .estimator import MeshGaussianPrior
from .fixtures import make_fixture_rig, make_uv_texture
from .gaussian_map import (GaussianMap, SurfelSet, decode_backward,
                           decode_surfels, load_gmap, save_gmap)
from .imageio import load_f32, load_png, save_f32, save_png
from .metrics import eval_metrics, l1, psnr, ssim, write_csv
from .objectives import LossReport, LossWeights, l1_loss, ssim_loss, total_loss
from .optim import Adam, KroneckerPreconditioner
from .ply_export import export_ply, read_ply
from .prior import (GeometryStats, PriorConfig, TrainConfig, TrainSample,
                    build_input_maps, compute_geometry_stats,
                    decode_texels, decode_texels_backward, encode_driving,
                    encode_driving_backward, init_weights, load_weights,
                    predict_backward, predict_gaussian_map,
                    render_prediction, save_weights, train_prior,
                    UVInputMaps)
from .renderer import (Camera, RenderGrads, RenderOutput,
                       depth_distortion, depth_distortion_image,
                       normal_consistency, normal_consistency_image,
                       rasterize, rasterize_backward)
from .rig import (AnchorTable, DrivingSignal, SurfaceFrames, TemplateRig,
                  load_rig, posed_vertices, rig_frames, save_rig,
                  surface_frames, texel_anchors)
from .warmstart import bake_raw_map, distill_raw_map, subject_warm_start

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "Adapter", "EnhancerHandle", "IdentityEnhancer",
    "OracleEnhancer", "RemoteEnhancer", "adapt_stage1", "adapt_stage2",
    "generate_supervision", "sample_novel_conditions",
    "BenchmarkConfig", "canonical_conditioning", "load_bench_manifest",
    "make_synthetic_benchmark",
    "EnhancerSpec", "InitSpec", "PriorHyper", "RendererSpec", "RunConfig",
    "load_run_config", "parse_run_config",
    "AvatarDataset", "FrameRecord", "dataset_to_json", "load_dataset", "load_train_samples",
    "save_dataset",
    "ConfigError", "ContractError", "DatasetError", "EnhancerError",
    "LockError", "MeshsplatError", "TrainingDivergedError",
    "MeshGaussianPrior",
    "make_fixture_rig", "make_uv_texture",
    "GaussianMap", "SurfelSet", "decode_backward", "decode_surfels",
    "load_gmap", "save_gmap",
    "load_f32", "load_png", "save_f32", "save_png",
    "eval_metrics", "l1", "psnr", "ssim", "write_csv",
    "LossReport", "LossWeights", "l1_loss", "ssim_loss", "total_loss",
    "Adam", "KroneckerPreconditioner",
    "export_ply", "read_ply",
    "GeometryStats", "PriorConfig", "TrainConfig", "TrainSample",
    "build_input_maps", "compute_geometry_stats", "decode_texels",
    "decode_texels_backward", "encode_driving", "encode_driving_backward",
    "init_weights",
    "load_weights", "predict_backward", "predict_gaussian_map",
    "render_prediction", "save_weights", "train_prior", "UVInputMaps",
    "Camera", "RenderGrads", "RenderOutput", "depth_distortion",
    "depth_distortion_image",
    "normal_consistency", "normal_consistency_image", "rasterize",
    "rasterize_backward",
    "AnchorTable", "DrivingSignal", "SurfaceFrames", "TemplateRig",
    "load_rig", "posed_vertices", "rig_frames", "save_rig",
    "surface_frames", "texel_anchors",
    "bake_raw_map", "distill_raw_map", "subject_warm_start",
    "__version__",
]
