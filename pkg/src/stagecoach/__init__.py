"""Desk-scale step-based parallel I/O: N-M sub-file aggregation with a global
index, burst-buffer writes with async drain, in-line lossless compression,
and a producer/consumer staging transport for in-situ analysis."""

from .codecs import (
    CODEC_DEFLATE,
    CODEC_LZ4,
    CODEC_NONE,
    CODEC_ZSTD,
    OperatorSpec,
    OperatorTable,
)
from .config import EngineConfig, load_config_file, write_config_file
from .container import GlobalIndex, IndexEntry
from .engine import FileWriteEngine
from .model import DataBlock, DType, Selection, StepToken, VariableDef
from .reader import FileReader, intersect, tiles_exactly
from .staging import (
    StagingConsumer,
    StagingEngine,
    StepQueue,
    pipeline_overlap_report,
)
from .topology import (
    AggregatorAssignment,
    RankTopology,
    assign_aggregators,
    fpp_assignment,
    funnel_assignment,
)
from .workload import WorkloadSpec

__version__ = "0.1.0"

__all__ = [
    "AggregatorAssignment",
    "CODEC_DEFLATE",
    "CODEC_LZ4",
    "CODEC_NONE",
    "CODEC_ZSTD",
    "DataBlock",
    "DType",
    "EngineConfig",
    "FileReader",
    "FileWriteEngine",
    "GlobalIndex",
    "IndexEntry",
    "OperatorSpec",
    "OperatorTable",
    "RankTopology",
    "Selection",
    "StagingConsumer",
    "StagingEngine",
    "StepQueue",
    "StepToken",
    "VariableDef",
    "WorkloadSpec",
    "assign_aggregators",
    "fpp_assignment",
    "funnel_assignment",
    "intersect",
    "load_config_file",
    "pipeline_overlap_report",
    "tiles_exactly",
    "write_config_file",
]
