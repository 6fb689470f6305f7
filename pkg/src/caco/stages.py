"""Stage graph: unify, sample, filter, reverse, solve, verify, audit, and run_all."""

from __future__ import annotations

import hashlib
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .answers import EmptyOutput, answers_match, normalize_stdout, parse_answer
from .executor import SandboxExecutor
from .gateway import Gateway, GatewayError, Role, UnparseableVerdict, default_params
from .model import (
    CandidateProgram,
    DatasetRecord,
    ExecStatus,
    LineageEntry,
    Origin,
    Problem,
    SamplingParams,
    Solution,
    Verdict,
    dumps_record,
)
from .store import (
    FunnelReport,
    StageCheckpoint,
    append_rows,
    funnel_report,
    load_rows,
    read_checkpoint,
    rewrite_rows,
    write_checkpoint,
)
from .validator import validate

STAGE_ORDER = (
    "unify",
    "filter-seed",
    "sample",
    "filter-sampled",
    "reverse",
    "solve",
    "verify",
)

REJECTION_REASONS = frozenset(
    {
        "solve-rate",
        "completion-error",
        "syntax-ok",
        "has-input-mapping",
        "calls-with-input",
        "assigns-output",
        "prints-output",
        "min-lines",
        "keys-used",
        "runtime-error",
        "timeout",
        "output-overflow",
        "setup-error",
        "output-mismatch",
        "duplicate",
        "empty-problem",
        "answer-mismatch",
        "cot-inconsistent",
        "judge-unparseable",
    }
)

PROBLEM_MARKER = "### Math Problem:"
PROBLEM_END_MARKER = "### End Problem"

_FENCE_RE = re.compile(r"```(?:[A-Za-z0-9_+-]*)\s*\n(.*?)```", re.DOTALL)


class EmptyProblem(ValueError):
    pass


def extract_code_block(reply: str) -> str:
    """First fenced code block; with no fence the whole reply is treated as code."""
    match = _FENCE_RE.search(reply)
    text = match.group(1) if match else reply
    return text.strip("\n")


def trim_problem(reply: str) -> str:
    """Problem text after the last problem marker, without the end marker echo."""
    text = reply
    at = text.rfind(PROBLEM_MARKER)
    if at >= 0:
        text = text[at + len(PROBLEM_MARKER) :]
    end = text.find(PROBLEM_END_MARKER)
    if end >= 0:
        text = text[:end]
    return text.strip()


@dataclass(frozen=True)
class Rejection:
    id: str
    stage: str
    reason: str
    detail: str = ""

    def to_row(self) -> dict:
        return {"id": self.id, "stage": self.stage, "reason": self.reason, "detail": self.detail}


@dataclass(frozen=True)
class AuditReport:
    sample_size: int
    solvable_yes: int = 0
    solvable_no: int = 0
    correct_yes: int = 0
    correct_no: int = 0
    unparseable: int = 0


class UtcClock:
    def now_iso(self) -> str:
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class FixedClock:
    instant: str = "1970-01-01T00:00:00Z"

    def now_iso(self) -> str:
        return self.instant


@dataclass
class PipelineOptions:
    run_dir: Path | None = None
    seeds_path: Path | None = None
    sample_n: int = 0
    workers: int = 4
    min_lines: int = 6
    k_reverse: int = 1
    solve_rate_max: float | None = None
    audit_seed: int = 0
    sample_params: SamplingParams | None = None
    deterministic_clock: bool = False


def load_seed_items(path: str | Path) -> list[dict]:
    """Seed problems from JSONL; each gets a stable content-derived id."""
    items = []
    for row in load_rows(path).rows:
        item = dict(row)
        rate = item.get("solve_rate")
        if rate is not None and not (0.0 <= float(rate) <= 1.0):
            raise ValueError(f"seed solve_rate out of range: {rate!r}")
        item["__id"] = item.get("id") or hashlib.sha256(
            dumps_record({k: v for k, v in sorted(row.items())}).encode("utf-8")
        ).hexdigest()
        items.append(item)
    return items


def _hist(rej_rows: Sequence[dict]) -> dict:
    hist: dict[str, int] = {}
    for row in rej_rows:
        reason = row.get("reason", "unknown")
        hist[reason] = hist.get(reason, 0) + 1
    return hist


def _ids_digest(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()


class Pipeline:
    """Binds the gateway, the executor, and the run options into the stage graph."""

    def __init__(
        self,
        gateway: Gateway,
        executor: SandboxExecutor,
        options: PipelineOptions | None = None,
    ):
        self.gateway = gateway
        self.executor = executor
        self.options = options or PipelineOptions()
        self.clock = FixedClock() if self.options.deterministic_clock else UtcClock()

    # --- per-item workers -------------------------------------------------

    def _entry(self, stage: str) -> dict:
        return LineageEntry(stage, self.clock.now_iso()).to_dict()

    def _unify_one(self, item_id: str, item: dict) -> tuple[list[dict], Rejection | None]:
        rate = item.get("solve_rate")
        cap = self.options.solve_rate_max
        if cap is not None and rate is not None and float(rate) >= cap:
            return [], Rejection(item_id, "unify", "solve-rate", f"{rate} >= {cap}")
        kind = item.get("kind") or ("algo" if item.get("code") else "math")
        if kind == "algo":
            role = Role.UNIFIER_ALGO
            origin = Origin.SEED_ALGO
            bindings = {"code": item.get("code", ""), "test_code": item.get("test_code", "")}
        else:
            role = Role.UNIFIER_MATH
            origin = Origin.SEED_MATH
            bindings = {"problem": item.get("problem", ""), "solution": item.get("solution", "")}
        try:
            completion = self.gateway.generate(role, bindings)
        except GatewayError as exc:
            return [], Rejection(item_id, "unify", "completion-error", str(exc)[:300])
        source = extract_code_block(completion.text)
        meta: dict = {"seed_id": item_id}
        if item.get("ground_truth") is not None:
            meta["ground_truth"] = str(item["ground_truth"])
        if rate is not None:
            meta["solve_rate"] = float(rate)
        if item.get("source"):
            meta["source"] = item["source"]
        candidate = CandidateProgram(source=source, origin=origin, meta=meta)
        row = candidate.to_dict()
        row["lineage"] = [self._entry("unify")]
        return [row], None

    def _sample_one(self, draw_id: str, ordinal: int) -> tuple[list[dict], Rejection | None]:
        params = self.options.sample_params or default_params(Role.CODEGEN)
        try:
            completion = self.gateway.generate(Role.CODEGEN, {}, params=params, ordinal=ordinal)
        except GatewayError as exc:
            return [], Rejection(draw_id, "sample", "completion-error", str(exc)[:300])
        source = extract_code_block(completion.text)
        candidate = CandidateProgram(
            source=source, origin=Origin.SAMPLED, meta={"draw": ordinal, "draw_id": draw_id}
        )
        row = candidate.to_dict()
        row["lineage"] = [self._entry("sample")]
        return [row], None

    def _filter_one(
        self, stage: str, row: dict, require_answer_match: bool
    ) -> tuple[list[dict], Rejection | None]:
        candidate = CandidateProgram.from_dict(row)
        report = validate(candidate.source, min_lines=self.options.min_lines)
        if not report.passed:
            failed = report.first_failed() or "syntax-ok"
            detail = next((c.detail for c in report.checks if c.check == failed), "")
            return [], Rejection(candidate.id, stage, failed, detail)
        result = self.executor.execute_plain(candidate)
        if result.status is not ExecStatus.OK:
            detail = result.exception.message if result.exception else f"exit {result.exit_code}"
            return [], Rejection(candidate.id, stage, result.status.value, detail)
        truth = candidate.meta.get("ground_truth")
        if require_answer_match and truth is not None:
            try:
                produced = normalize_stdout(result.stdout)
            except EmptyOutput:
                return [], Rejection(candidate.id, stage, "output-mismatch", "empty stdout")
            if not answers_match(produced, parse_answer(str(truth))):
                return [], Rejection(
                    candidate.id,
                    stage,
                    "output-mismatch",
                    f"stdout {produced.raw!r} vs truth {truth!r}",
                )
        frozen = isinstance(self.clock, FixedClock)
        out = candidate.to_dict()
        out["meta"] = {
            **candidate.meta,
            "stdout": result.stdout,
            "exec_duration_ms": 0 if frozen else result.duration_ms,
        }
        out["lineage"] = list(row.get("lineage") or ()) + [self._entry(stage)]
        return [out], None

    def _reverse_one(self, work_id: str, row: dict) -> tuple[list[dict], Rejection | None]:
        try:
            completion = self.gateway.generate(Role.REVERSER, {"code": row["source"]})
        except GatewayError as exc:
            return [], Rejection(work_id, "reverse", "completion-error", str(exc)[:300])
        text = trim_problem(completion.text)
        if not text:
            return [], Rejection(work_id, "reverse", "empty-problem", "blank reply")
        out = {
            "id": work_id,
            "problem": text,
            "code": row["source"],
            "origin": row["origin"],
            "meta": {**(row.get("meta") or {}), "work_id": work_id},
            "lineage": list(row.get("lineage") or ()) + [self._entry("reverse")],
        }
        return [out], None

    def _solve_one(self, work_id: str, row: dict) -> tuple[list[dict], Rejection | None]:
        try:
            completion = self.gateway.generate(Role.SOLVER, {"problem": row["problem"]})
        except GatewayError as exc:
            return [], Rejection(work_id, "solve", "completion-error", str(exc)[:300])
        out = dict(row)
        out["solution"] = completion.text
        out["lineage"] = list(row.get("lineage") or ()) + [self._entry("solve")]
        return [out], None

    def _verdict_for(
        self, solution: Solution, candidate: CandidateProgram, stdout: str | None
    ) -> tuple[Verdict, str | None, str]:
        """Answer check first; the judge runs only when the answers agree."""
        if stdout is None:
            result = self.executor.execute_plain(candidate)
            stdout = result.stdout if result.status is ExecStatus.OK else ""
        answer_match = False
        detail = ""
        if solution.answer is None:
            detail = "no boxed answer in solution"
        else:
            try:
                produced = normalize_stdout(stdout)
                answer_match = answers_match(solution.answer, produced)
                if not answer_match:
                    detail = f"boxed {solution.boxed_raw!r} vs stdout {produced.raw!r}"
            except EmptyOutput:
                detail = "empty stdout"
        if not answer_match:
            return Verdict(False, False), "answer-mismatch", detail
        try:
            consistent = self.gateway.judge(
                Role.JUDGE_CONSISTENCY,
                {"solution": solution.text, "code": candidate.source},
            )
        except UnparseableVerdict as exc:
            return Verdict(True, False), "judge-unparseable", str(exc)[:300]
        except GatewayError as exc:
            return Verdict(True, False), "completion-error", str(exc)[:300]
        if not consistent:
            return Verdict(True, False), "cot-inconsistent", ""
        return Verdict(True, True), None, ""

    def _verify_one(self, work_id: str, row: dict) -> tuple[list[dict], Rejection | None]:
        candidate = CandidateProgram.from_dict(
            {"source": row["code"], "origin": row["origin"], "meta": row.get("meta") or {}}
        )
        solution = Solution.from_text(row["solution"])
        verdict, reason, detail = self._verdict_for(
            solution, candidate, candidate.meta.get("stdout")
        )
        if reason is not None:
            return [], Rejection(work_id, "verify", reason, detail)
        record = DatasetRecord(
            problem=Problem(row["problem"]),
            solution=solution,
            program=candidate,
            verdict=verdict,
            lineage=tuple(
                LineageEntry.from_dict(e) for e in (row.get("lineage") or ())
            )
            + (LineageEntry("verify", self.clock.now_iso()),),
        )
        return [record.to_dict()], None

    # --- in-memory stage operations ----------------------------------------

    def _run_many(
        self, pairs: Sequence[tuple[str, object]], worker: Callable
    ) -> tuple[list[dict], list[Rejection]]:
        rows: list[dict] = []
        rejections: list[Rejection] = []
        lock = threading.Lock()

        def handle(pair):
            out_rows, rejection = worker(pair[0], pair[1])
            with lock:
                rows.extend(out_rows)
                if rejection is not None:
                    rejections.append(rejection)

        max_workers = max(1, self.options.workers)
        if max_workers == 1 or len(pairs) <= 1:
            for pair in pairs:
                handle(pair)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(handle, pairs))
        return rows, rejections

    @staticmethod
    def _dedup_rows(
        rows: Sequence[dict], order_key: Callable[[dict], object], done_key: Callable[[dict], str]
    ) -> tuple[list[dict], list[tuple[str, str]]]:
        ordered = sorted(rows, key=order_key)
        seen: set[str] = set()
        kept: list[dict] = []
        dropped: list[tuple[str, str]] = []
        for row in ordered:
            if row["id"] in seen:
                dropped.append((done_key(row), row["id"]))
            else:
                seen.add(row["id"])
                kept.append(row)
        return kept, dropped

    def stage_unify(
        self, items: Sequence[dict]
    ) -> tuple[list[CandidateProgram], list[Rejection]]:
        """Generate template candidates from seeds, then filter them with answer matching."""
        pairs = [(item.get("__id") or f"seed-{i:06d}", item) for i, item in enumerate(items)]
        rows, rejections = self._run_many(pairs, self._unify_one)
        candidates = [CandidateProgram.from_dict(row) for row in rows]
        kept, filter_rejections = self.stage_filter(candidates, require_answer_match=True)
        return kept, rejections + filter_rejections

    def stage_sample(
        self, n: int, params: SamplingParams | None = None
    ) -> tuple[list[CandidateProgram], list[Rejection]]:
        """Draw n completions from the empty scaffold; duplicates by id are dropped."""
        if params is not None:
            previous = self.options.sample_params
            self.options.sample_params = params
        try:
            pairs = [(f"draw-{i:06d}", i) for i in range(n)]
            rows, rejections = self._run_many(pairs, self._sample_one)
        finally:
            if params is not None:
                self.options.sample_params = previous
        kept, dropped = self._dedup_rows(
            rows, order_key=lambda r: r["meta"]["draw"], done_key=lambda r: r["meta"]["draw_id"]
        )
        for done_id, dup_of in dropped:
            rejections.append(Rejection(done_id, "sample", "duplicate", dup_of))
        return [CandidateProgram.from_dict(row) for row in kept], rejections

    def stage_filter(
        self, candidates: Sequence[CandidateProgram], require_answer_match: bool
    ) -> tuple[list[CandidateProgram], list[Rejection]]:
        """Static checks, sandboxed execution, and optional ground-truth matching."""
        stage = "filter-seed" if require_answer_match else "filter-sampled"
        pairs = [(c.id, c.to_dict()) for c in candidates]
        rows, rejections = self._run_many(
            pairs, lambda _id, row: self._filter_one(stage, row, require_answer_match)
        )
        return [CandidateProgram.from_dict(row) for row in rows], rejections

    def stage_reverse(self, candidate: CandidateProgram) -> Problem:
        """Back-translate one candidate into a problem statement."""
        rows, rejection = self._reverse_one(candidate.id, candidate.to_dict())
        if rejection is not None:
            if rejection.reason == "empty-problem":
                raise EmptyProblem(rejection.detail)
            raise GatewayError(rejection.detail)
        return Problem(rows[0]["problem"])

    def stage_solve(self, problem: Problem) -> Solution:
        """Produce a natural-language solution; the boxed answer may be absent."""
        completion = self.gateway.generate(Role.SOLVER, {"problem": problem.text})
        return Solution.from_text(completion.text)

    def stage_verify(
        self, problem: Problem, solution: Solution, candidate: CandidateProgram
    ) -> Verdict:
        """Dual check: answer equivalence, then chain-of-thought consistency."""
        verdict, _, _ = self._verdict_for(solution, candidate, candidate.meta.get("stdout"))
        return verdict

    def stage_audit(
        self, records: Sequence[DatasetRecord], sample_size: int, seed: int | None = None
    ) -> AuditReport:
        """Judge solvability and correctness over a uniform sample of records."""
        rng = random.Random(self.options.audit_seed if seed is None else seed)
        size = min(sample_size, len(records))
        chosen = rng.sample(list(records), size) if size else []
        solvable_yes = solvable_no = correct_yes = correct_no = unparseable = 0
        for record in chosen:
            try:
                if self.gateway.judge(Role.JUDGE_SOLVABLE, {"problem": record.problem.text}):
                    solvable_yes += 1
                else:
                    solvable_no += 1
            except GatewayError:
                unparseable += 1
            try:
                if self.gateway.judge(
                    Role.JUDGE_CORRECT,
                    {"problem": record.problem.text, "solution": record.solution.text},
                ):
                    correct_yes += 1
                else:
                    correct_no += 1
            except GatewayError:
                unparseable += 1
        return AuditReport(size, solvable_yes, solvable_no, correct_yes, correct_no, unparseable)

    # --- persisted stage graph ----------------------------------------------

    def _stage_dir(self, stage: str) -> Path:
        if self.options.run_dir is None:
            raise ValueError("run_dir is not configured")
        return Path(self.options.run_dir) / stage

    def _persisted_stage(
        self,
        stage: str,
        pairs: Sequence[tuple[str, object]],
        worker: Callable,
        done_key: Callable[[dict], str],
        dedup_order: Callable[[dict], object] | None = None,
        extra_rejections: Sequence[Rejection] = (),
    ) -> list[dict]:
        stage_dir = self._stage_dir(stage)
        out_path = stage_dir / "out.jsonl"
        rejects_path = stage_dir / "rejects.jsonl"
        known_extra = {r.id for r in extra_rejections}
        total_in = len(pairs) + len(known_extra - {p[0] for p in pairs})
        checkpoint = read_checkpoint(stage_dir)
        if checkpoint is not None and checkpoint.complete and checkpoint.in_count == total_in:
            return list(load_rows(out_path).rows)
        stage_dir.mkdir(parents=True, exist_ok=True)

        existing_rejects = load_rows(rejects_path).rows
        done = {done_key(row) for row in load_rows(out_path).rows}
        done.update(row["id"] for row in existing_rejects)
        todo = [pair for pair in pairs if pair[0] not in done]
        lock = threading.Lock()

        def handle(pair):
            out_rows, rejection = worker(pair[0], pair[1])
            with lock:
                if out_rows:
                    append_rows(out_path, out_rows)
                if rejection is not None:
                    append_rows(rejects_path, [rejection.to_row()])

        max_workers = max(1, self.options.workers)
        if todo:
            if max_workers == 1 or len(todo) == 1:
                for pair in todo:
                    handle(pair)
            else:
                with ThreadPoolExecutor(max_workers=max_workers) as pool:
                    list(pool.map(handle, todo))
        for rejection in extra_rejections:
            if rejection.id not in done:
                append_rows(rejects_path, [rejection.to_row()])

        out_rows = list(load_rows(out_path).rows)
        rej_rows = list(load_rows(rejects_path).rows)
        if dedup_order is not None:
            out_rows, dropped = self._dedup_rows(out_rows, dedup_order, done_key)
            for done_id, dup_of in dropped:
                row = Rejection(done_id, stage, "duplicate", dup_of).to_row()
                if all(r["id"] != done_id for r in rej_rows):
                    rej_rows.append(row)
        out_rows.sort(key=lambda r: (r["id"], dumps_record(r)))
        rej_rows.sort(key=lambda r: (r["id"], r.get("reason", "")))
        rewrite_rows(out_path, out_rows)
        rewrite_rows(rejects_path, rej_rows)
        write_checkpoint(
            stage_dir,
            StageCheckpoint(
                stage=stage,
                in_count=total_in,
                out_count=len(out_rows),
                rejected=_hist(rej_rows),
                cursor=total_in,
                processed_digest=_ids_digest([p[0] for p in pairs]),
                complete=True,
            ),
        )
        return out_rows

    def run_all(self, stop_after: str | None = None) -> FunnelReport:
        """Drive every stage in order with checkpointed, resumable persistence."""
        if stop_after is not None and stop_after not in STAGE_ORDER:
            raise ValueError(f"unknown stage {stop_after!r}")
        opts = self.options
        items = load_seed_items(opts.seeds_path) if opts.seeds_path else []

        def stopped(stage: str) -> bool:
            return stop_after == stage

        unify_rows = self._persisted_stage(
            "unify",
            [(item["__id"], item) for item in items],
            self._unify_one,
            done_key=lambda row: row["meta"]["seed_id"],
        )
        if not stopped("unify"):
            seed_rows = self._persisted_stage(
                "filter-seed",
                [(row["id"], row) for row in unify_rows],
                lambda _id, row: self._filter_one("filter-seed", row, True),
                done_key=lambda row: row["id"],
            )
            if not stopped("filter-seed"):
                sample_rows = self._persisted_stage(
                    "sample",
                    [(f"draw-{i:06d}", i) for i in range(opts.sample_n)],
                    self._sample_one,
                    done_key=lambda row: row["meta"]["draw_id"],
                    dedup_order=lambda row: row["meta"]["draw"],
                )
                if not stopped("sample"):
                    sampled_rows = self._persisted_stage(
                        "filter-sampled",
                        [(row["id"], row) for row in sample_rows],
                        lambda _id, row: self._filter_one("filter-sampled", row, False),
                        done_key=lambda row: row["id"],
                    )
                    if not stopped("filter-sampled"):
                        self._run_tail(seed_rows, sampled_rows, stop_after)
        return funnel_report(opts.run_dir, STAGE_ORDER)

    def _run_tail(
        self, seed_rows: list[dict], sampled_rows: list[dict], stop_after: str | None
    ) -> None:
        opts = self.options
        combined = sorted(seed_rows + sampled_rows, key=lambda r: r["id"])
        unique: list[dict] = []
        dup_rejections: list[Rejection] = []
        seen: set[str] = set()
        for row in combined:
            if row["id"] in seen:
                dup_rejections.append(
                    Rejection(f"{row['id']}#dup", "reverse", "duplicate", row["id"])
                )
            else:
                seen.add(row["id"])
                unique.append(row)

        work: list[tuple[str, dict]] = []
        for row in unique:
            for i in range(max(1, opts.k_reverse)):
                work_id = row["id"] if opts.k_reverse <= 1 else f"{row['id']}#r{i}"
                work.append((work_id, row))

        reverse_rows = self._persisted_stage(
            "reverse",
            work,
            self._reverse_one,
            done_key=lambda row: row["meta"]["work_id"],
            extra_rejections=dup_rejections,
        )
        if stop_after == "reverse":
            return
        solve_rows = self._persisted_stage(
            "solve",
            [(row["id"], row) for row in reverse_rows],
            self._solve_one,
            done_key=lambda row: row["meta"]["work_id"],
        )
        if stop_after == "solve":
            return
        self._persisted_stage(
            "verify",
            [(row["meta"]["work_id"], row) for row in solve_rows],
            self._verify_one,
            done_key=lambda row: row["meta"]["work_id"],
        )

    def accepted_records(self) -> list[DatasetRecord]:
        rows = load_rows(self._stage_dir("verify") / "out.jsonl").rows
        return [DatasetRecord.from_dict(row) for row in rows]
