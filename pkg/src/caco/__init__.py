"""Verified reasoning-data synthesis: executable templates in, checked records out."""

from .answers import (
    AnswerForm,
    EmptyOutput,
    NoBoxedAnswer,
    answers_match,
    extract_boxed,
    normalize_stdout,
    parse_answer,
)
from .config import AppConfig, ConfigError, build_executor, build_gateway, build_pipeline, load_config
from .executor import ExecLimits, SandboxExecutor
from .gateway import Completion, Gateway, GatewayError, HttpBackend, MockBackend, PromptLibrary, Role
from .model import (
    CandidateProgram,
    DatasetRecord,
    ExecStatus,
    ExecutionResult,
    LineageEntry,
    Origin,
    Problem,
    SamplingParams,
    Solution,
    ValidationReport,
    Verdict,
    program_id,
)
from .stages import (
    STAGE_ORDER,
    AuditReport,
    EmptyProblem,
    Pipeline,
    PipelineOptions,
    Rejection,
    load_seed_items,
)
from .store import FunnelReport, StageCheckpoint, funnel_report
from .validator import validate

__version__ = "0.1.0"

__all__ = [
    "AnswerForm",
    "AppConfig",
    "AuditReport",
    "CandidateProgram",
    "Completion",
    "ConfigError",
    "DatasetRecord",
    "EmptyOutput",
    "EmptyProblem",
    "ExecLimits",
    "ExecStatus",
    "ExecutionResult",
    "FunnelReport",
    "Gateway",
    "GatewayError",
    "HttpBackend",
    "LineageEntry",
    "MockBackend",
    "NoBoxedAnswer",
    "Origin",
    "Pipeline",
    "PipelineOptions",
    "Problem",
    "PromptLibrary",
    "Rejection",
    "Role",
    "STAGE_ORDER",
    "SamplingParams",
    "SandboxExecutor",
    "Solution",
    "StageCheckpoint",
    "ValidationReport",
    "Verdict",
    "answers_match",
    "build_executor",
    "build_gateway",
    "build_pipeline",
    "extract_boxed",
    "funnel_report",
    "load_config",
    "load_seed_items",
    "normalize_stdout",
    "parse_answer",
    "program_id",
    "validate",
]
