# attribution_utils/__init__.py

from .core.Citations import Citation, Modality, Response, TimeSpan, parse_response
from .core.JudgeGateway import JudgeConfig, JudgeGateway
from .core.MediaStore import MediaStore, load_manifest
from .core.EvalPipeline import EvalPipeline, EvalRecord
from .config.RunConfig import RunConfig
from .benchmarks.Metrics import DatasetReport, MetricBundle, aggregate, compute_bundle
from .benchmarks.ResultsProcessor import ResultsProcessor
from .benchmarks.GenerationRunner import EvalTask, GenerationRunner, GenerationVariant
from .overall.MetaEvaluator import MetaEvaluator, correlate, correlation_report
from .programs.ProgramParser import GroundingProgram, parse_program
from .programs.ProgramExecutor import ProgramExecutor

__all__ = [
    "Citation", "Modality", "Response", "TimeSpan", "parse_response",
    "JudgeConfig", "JudgeGateway", "MediaStore", "load_manifest", "EvalPipeline", "EvalRecord",
    "RunConfig", "DatasetReport", "MetricBundle", "aggregate", "compute_bundle", "ResultsProcessor",
    "EvalTask", "GenerationRunner", "GenerationVariant", "MetaEvaluator", "correlate", "correlation_report",
    "GroundingProgram", "parse_program", "ProgramExecutor",
]
