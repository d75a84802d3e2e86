"""Dual-path video temporal grounding: sentence-level and phrase-level alignment over clip features."""
from .config import RunConfig, load_config
from .data_io import SyntheticSpec, load_feature_archive, synthesize_dataset, write_feature_archive
from .evaluation import MetricReport, evaluate
from .model import DualGround

__all__ = ["DualGround", "MetricReport", "RunConfig", "SyntheticSpec", "evaluate", "load_config",
           "load_feature_archive", "synthesize_dataset", "write_feature_archive"]
__version__ = "0.1.0"
