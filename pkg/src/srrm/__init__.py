"""Multiscale brightness-temperature disaggregation with segmented kernel regression."""

from .evaluation import evaluate_run, neighbor_max_diff, pdf_compare, summary_stats
from .pipeline import (DisaggregationResult, PipelineConfig, SRRMDisaggregator, disaggregate,
                       load_config, parse_config)
from .raster import FractionStack, Grid, block_aggregate, read_fgrid, write_fgrid
from .scene import Scene, read_scene, write_scene
from .segmentation import CauchySchwarzSegmenter, SegmentationConfig, optimize_memberships
from .svr import EpsilonSVR, SvrTrainConfig, svr_predict, svr_train
from .synth import SynthParams, generate_scene, scenario_params, scene_catalog

__version__ = "0.1.0"

__all__ = [
    "CauchySchwarzSegmenter", "DisaggregationResult", "EpsilonSVR", "FractionStack", "Grid",
    "PipelineConfig", "SRRMDisaggregator", "Scene", "SegmentationConfig", "SvrTrainConfig",
    "SynthParams", "block_aggregate", "disaggregate", "evaluate_run", "generate_scene", "load_config",
    "neighbor_max_diff", "optimize_memberships", "parse_config", "pdf_compare", "read_fgrid",
    "read_scene", "scenario_params", "scene_catalog", "summary_stats", "svr_predict", "svr_train", "write_fgrid",
    "write_scene",
]
