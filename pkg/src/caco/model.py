"""Value types shared by every pipeline stage, plus their JSONL round-trip."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .answers import AnswerForm


class Origin(str, Enum):
    SEED_MATH = "seed-math"
    SEED_ALGO = "seed-algo"
    SAMPLED = "sampled"


class ExecStatus(str, Enum):
    OK = "ok"
    RUNTIME_ERROR = "runtime-error"
    TIMEOUT = "timeout"
    OUTPUT_OVERFLOW = "output-overflow"
    SETUP_ERROR = "setup-error"


def normalize_source(source: str) -> str:
    """Canonical form used for hashing: LF newlines, trailing blank lines dropped."""
    lines = source.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(lines)


def program_id(source: str) -> str:
    """Content hash of the normalized source (hex SHA-256)."""
    return hashlib.sha256(normalize_source(source).encode("utf-8")).hexdigest()


def _check_solve_rate(meta: dict) -> None:
    rate = meta.get("solve_rate")
    if rate is None:
        return
    if not isinstance(rate, (int, float)) or not (0.0 <= float(rate) <= 1.0):
        raise ValueError(f"solve_rate must lie in [0, 1], got {rate!r}")


@dataclass(frozen=True)
class CandidateProgram:
    """A generated or refactored program; id is derived from source, never stored state."""

    source: str
    origin: Origin
    meta: dict = field(default_factory=dict)
    id: str = field(default="", compare=True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", Origin(self.origin))
        object.__setattr__(self, "id", program_id(self.source))
        _check_solve_rate(self.meta)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "origin": self.origin.value,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateProgram":
        return cls(
            source=data["source"],
            origin=Origin(data["origin"]),
            meta=dict(data.get("meta") or {}),
        )


@dataclass(frozen=True)
class ExceptionInfo:
    class_name: str
    message: str = ""

    def to_dict(self) -> dict:
        return {"class": self.class_name, "message": self.message}

    @classmethod
    def from_dict(cls, data: dict) -> "ExceptionInfo":
        return cls(class_name=data["class"], message=data.get("message", ""))


@dataclass(frozen=True)
class ExecutionResult:
    status: ExecStatus
    stdout: str = ""
    stdout_truncated: bool = False
    duration_ms: int = 0
    exit_code: int | None = None
    exception: ExceptionInfo | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "status", ExecStatus(self.status))
        if self.duration_ms < 0:
            raise ValueError("duration_ms must be non-negative")
        if self.status is ExecStatus.OK and self.exit_code != 0:
            raise ValueError("ok status requires exit code 0")

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "stdout": self.stdout,
            "stdout_truncated": self.stdout_truncated,
            "duration_ms": self.duration_ms,
            "exit_code": self.exit_code,
            "exception": self.exception.to_dict() if self.exception else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutionResult":
        exc = data.get("exception")
        return cls(
            status=ExecStatus(data["status"]),
            stdout=data.get("stdout", ""),
            stdout_truncated=bool(data.get("stdout_truncated", False)),
            duration_ms=int(data.get("duration_ms", 0)),
            exit_code=data.get("exit_code"),
            exception=ExceptionInfo.from_dict(exc) if exc else None,
        )


@dataclass(frozen=True)
class StructuralFacts:
    input_keys: tuple[str, ...]
    called_function: str | None
    noncomment_lines: int
    has_output_print: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_keys", tuple(self.input_keys))
        if self.noncomment_lines < 0:
            raise ValueError("noncomment_lines must be non-negative")
        if len(set(self.input_keys)) != len(self.input_keys):
            raise ValueError("input_keys must be unique")


@dataclass(frozen=True)
class CheckResult:
    check: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    passed: bool
    facts: StructuralFacts

    def __post_init__(self) -> None:
        object.__setattr__(self, "checks", tuple(self.checks))
        if self.passed != all(c.passed for c in self.checks):
            raise ValueError("passed must equal the conjunction of all checks")

    def first_failed(self) -> str | None:
        for check in self.checks:
            if not check.passed:
                return check.check
        return None


@dataclass(frozen=True)
class Problem:
    text: str


@dataclass(frozen=True)
class Solution:
    """Solution text with the boxed answer, when one could be extracted."""

    text: str
    boxed_raw: str | None = None
    answer: "AnswerForm | None" = None

    def __post_init__(self) -> None:
        if (self.answer is None) != (self.boxed_raw is None):
            raise ValueError("answer must be present exactly when boxed_raw is")

    @classmethod
    def from_text(cls, text: str) -> "Solution":
        from .answers import NoBoxedAnswer, extract_boxed, parse_answer

        try:
            boxed = extract_boxed(text)
        except NoBoxedAnswer:
            return cls(text=text)
        return cls(text=text, boxed_raw=boxed, answer=parse_answer(boxed))


@dataclass(frozen=True)
class Verdict:
    answer_match: bool
    cot_consistent: bool
    accepted: bool | None = None

    def __post_init__(self) -> None:
        expected = self.answer_match and self.cot_consistent
        if self.accepted is None:
            object.__setattr__(self, "accepted", expected)
        elif self.accepted != expected:
            raise ValueError("accepted must equal answer_match AND cot_consistent")

    def to_dict(self) -> dict:
        return {
            "answer_match": self.answer_match,
            "cot_consistent": self.cot_consistent,
            "accepted": self.accepted,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        return cls(
            answer_match=bool(data["answer_match"]),
            cot_consistent=bool(data["cot_consistent"]),
            accepted=bool(data["accepted"]),
        )


@dataclass(frozen=True)
class LineageEntry:
    stage: str
    timestamp: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, data: dict) -> "LineageEntry":
        return cls(stage=data["stage"], timestamp=data["timestamp"])


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 1.0
    top_k: int = 0
    min_p: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if not (0.0 <= self.min_p < 1.0):
            raise ValueError("min_p must lie in [0, 1)")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "min_p": self.min_p,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class DatasetRecord:
    problem: Problem
    solution: Solution
    program: CandidateProgram
    verdict: Verdict
    lineage: tuple[LineageEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "lineage", tuple(self.lineage))

    @property
    def id(self) -> str:
        return self.program.id

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "problem": self.problem.text,
            "solution": self.solution.text,
            "code": self.program.source,
            "origin": self.program.origin.value,
            "meta": dict(self.program.meta),
            "verdict": self.verdict.to_dict(),
            "lineage": [entry.to_dict() for entry in self.lineage],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetRecord":
        return cls(
            problem=Problem(text=data["problem"]),
            solution=Solution.from_text(data["solution"]),
            program=CandidateProgram(
                source=data["code"],
                origin=Origin(data["origin"]),
                meta=dict(data.get("meta") or {}),
            ),
            verdict=Verdict.from_dict(data["verdict"]),
            lineage=tuple(LineageEntry.from_dict(e) for e in data.get("lineage") or ()),
        )


def dumps_record(data: dict) -> str:
    """Stable one-line JSON encoding used for every stored row."""
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def loads_record(line: str) -> dict:
    data = json.loads(line)
    if not isinstance(data, dict):
        raise ValueError("record line must hold a JSON object")
    return data
