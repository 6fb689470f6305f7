"""Stage operations and the checkpointed end-to-end funnel."""

import json
from fractions import Fraction

import pytest

from caco.answers import Variant
from caco.gateway import GatewayError, Role
from caco.model import CandidateProgram, Problem, Solution
from caco.stages import (
    REJECTION_REASONS,
    STAGE_ORDER,
    EmptyProblem,
    Rejection,
    extract_code_block,
    load_seed_items,
    trim_problem,
)
from caco.store import load_rows

from conftest import (
    TEMPLATE_OK,
    dual_verification_scenario,
    golden_source,
    make_pipeline,
    template_program,
)


# --- text helpers ---


def test_extract_code_block_reads_fenced_python():
    text = "Here is the program:\n```python\nprint(1)\n```\nDone."
    assert extract_code_block(text) == "print(1)"


def test_extract_code_block_tolerates_bare_fence():
    assert extract_code_block("```\nx = 1\nprint(x)\n```") == "x = 1\nprint(x)"


def test_extract_code_block_takes_first_fence():
    text = "```python\nfirst\n```\nmiddle\n```python\nsecond\n```"
    assert extract_code_block(text) == "first"


def test_extract_code_block_without_fence_returns_whole():
    assert extract_code_block("\nprint(2)\n\n") == "print(2)"


def test_trim_problem_cuts_at_last_marker():
    text = "preamble\n### Math Problem:\nWhat is 2 + 2?"
    assert trim_problem(text) == "What is 2 + 2?"


def test_trim_problem_cuts_trailing_section():
    text = "### Math Problem:\nWhat is 2 + 2?\n### End Problem\nextra notes"
    assert trim_problem(text) == "What is 2 + 2?"


def test_trim_problem_passthrough_without_markers():
    assert trim_problem("  What is 2 + 2?  ") == "What is 2 + 2?"


def test_trim_problem_marker_only_is_blank():
    assert trim_problem("### Math Problem:\n   ") == ""


# --- stage vocabulary ---


def test_stage_order_is_the_funnel():
    assert STAGE_ORDER == (
        "unify",
        "filter-seed",
        "sample",
        "filter-sampled",
        "reverse",
        "solve",
        "verify",
    )


def test_rejection_row_shape():
    row = Rejection("x", "sample", "duplicate", "y").to_row()
    assert row == {"id": "x", "stage": "sample", "reason": "duplicate", "detail": "y"}
    assert "duplicate" in REJECTION_REASONS


# --- seed loading ---


def test_load_seed_items_assigns_stable_ids(tmp_path):
    path = tmp_path / "seeds.jsonl"
    rows = [
        {"id": "named", "kind": "math", "problem": "p"},
        {"kind": "math", "problem": "q"},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    items = load_seed_items(path)
    assert items[0]["__id"] == "named"
    assert len(items[1]["__id"]) == 64
    assert items[1]["__id"] == load_seed_items(path)[1]["__id"]


def test_load_seed_items_rejects_bad_solve_rate(tmp_path):
    path = tmp_path / "seeds.jsonl"
    path.write_text(json.dumps({"problem": "p", "solve_rate": 1.5}) + "\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_seed_items(path)


# --- unify + seed filtering ---

DIE_SEED = {
    "kind": "math",
    "problem": "A die lands on each of 1..5 with chance 0.1 and on 6 with chance 0.5."
    " What is the expected value?",
    "solution": "Weight each face by its chance and add.",
    "ground_truth": "4.5",
}


def _fenced(source: str) -> str:
    return "```python\n" + source + "```"


def test_unify_keeps_candidate_matching_ground_truth():
    listing = golden_source("valid_expected_value.py")
    pipeline = make_pipeline({"unifier-math": _fenced(listing)}, workers=1)
    kept, rejections = pipeline.stage_unify([DIE_SEED])
    assert rejections == []
    assert len(kept) == 1
    assert kept[0].origin.value == "seed-math"
    assert kept[0].meta["ground_truth"] == "4.5"
    assert kept[0].meta["stdout"] == "4.5\n"


def test_unify_rejects_candidate_contradicting_ground_truth():
    wrong = TEMPLATE_OK  # prints 9, seed says 4.5
    pipeline = make_pipeline({"unifier-math": _fenced(wrong)}, workers=1)
    kept, rejections = pipeline.stage_unify([DIE_SEED])
    assert kept == []
    assert [r.reason for r in rejections] == ["output-mismatch"]
    assert rejections[0].stage == "filter-seed"


def test_unify_without_ground_truth_keeps_valid_program():
    seed = {"kind": "math", "problem": "p", "solution": "s"}
    pipeline = make_pipeline({"unifier-math": _fenced(TEMPLATE_OK)}, workers=1)
    kept, rejections = pipeline.stage_unify([seed])
    assert len(kept) == 1
    assert rejections == []


def test_unify_enforces_solve_rate_cap():
    seed = dict(DIE_SEED, solve_rate=0.95)
    pipeline = make_pipeline(
        {"unifier-math": _fenced(golden_source("valid_expected_value.py"))},
        workers=1,
        solve_rate_max=0.9,
    )
    kept, rejections = pipeline.stage_unify([seed])
    assert kept == []
    assert [r.reason for r in rejections] == ["solve-rate"]
    assert "0.95" in rejections[0].detail


def test_unify_solve_rate_under_cap_passes():
    seed = dict(DIE_SEED, solve_rate=0.3)
    pipeline = make_pipeline(
        {"unifier-math": _fenced(golden_source("valid_expected_value.py"))},
        workers=1,
        solve_rate_max=0.9,
    )
    kept, _ = pipeline.stage_unify([seed])
    assert len(kept) == 1
    assert kept[0].meta["solve_rate"] == 0.3


def test_unify_backend_miss_is_completion_error():
    pipeline = make_pipeline({}, workers=1)
    kept, rejections = pipeline.stage_unify([DIE_SEED])
    assert kept == []
    assert [r.reason for r in rejections] == ["completion-error"]
    assert rejections[0].stage == "unify"


def test_unify_algo_seed_uses_refactor_role():
    seed = {"kind": "algo", "code": "def f(): pass", "test_code": "f()"}
    pipeline = make_pipeline({"unifier-algo": _fenced(TEMPLATE_OK)}, workers=1)
    kept, rejections = pipeline.stage_unify([seed])
    assert rejections == []
    assert kept[0].origin.value == "seed-algo"
    calls = pipeline.gateway.backend.calls
    assert "unifier-algo" in calls and "unifier-math" not in calls


# --- sampling ---


def test_sample_three_distinct_draws():
    queue = [_fenced(template_program(i)) for i in range(3)]
    pipeline = make_pipeline({"codegen": {"queue": queue}}, workers=1)
    kept, rejections = pipeline.stage_sample(3)
    assert len(kept) == 3
    assert rejections == []
    assert {c.origin.value for c in kept} == {"sampled"}
    assert [c.meta["draw"] for c in kept] == [0, 1, 2]


def test_sample_identical_draws_collapse_to_one():
    pipeline = make_pipeline({"codegen": {"default": _fenced(TEMPLATE_OK)}}, workers=1)
    kept, rejections = pipeline.stage_sample(3)
    assert len(kept) == 1
    reasons = [r.reason for r in rejections]
    assert reasons == ["duplicate", "duplicate"]
    assert all(r.detail == kept[0].id for r in rejections)


def test_sample_zero_is_empty():
    pipeline = make_pipeline({}, workers=1)
    assert pipeline.stage_sample(0) == ([], [])


def test_sample_line_ending_variants_collapse():
    lf = "```python\ninput = {}\nx = 1\ny = 2\nz = 3\noutput = x\nprint(output)\n```"
    crlf = lf.replace("\n", "\r\n")
    pipeline = make_pipeline({"codegen": {"queue": [lf, crlf]}}, workers=1)
    kept, rejections = pipeline.stage_sample(2)
    assert len(kept) == 1
    assert [r.reason for r in rejections] == ["duplicate"]


# --- filtering sampled candidates ---


def _sampled(source: str, **meta) -> CandidateProgram:
    return CandidateProgram(source=source, origin="sampled", meta=meta)


def test_filter_sampled_never_consults_ground_truth():
    candidate = _sampled(TEMPLATE_OK, ground_truth="999")
    pipeline = make_pipeline(workers=1)
    kept, rejections = pipeline.stage_filter([candidate], require_answer_match=False)
    assert rejections == []
    assert len(kept) == 1
    assert kept[0].meta["stdout"] == "9\n"


def test_filter_seed_requires_ground_truth_match():
    candidate = CandidateProgram(
        source=TEMPLATE_OK, origin="seed-math", meta={"ground_truth": "999"}
    )
    pipeline = make_pipeline(workers=1)
    kept, rejections = pipeline.stage_filter([candidate], require_answer_match=True)
    assert kept == []
    assert [r.reason for r in rejections] == ["output-mismatch"]
    assert "9" in rejections[0].detail and "999" in rejections[0].detail


def test_filter_rejects_static_failures_by_check_id():
    candidate = _sampled("print(1)\n")
    pipeline = make_pipeline(workers=1)
    kept, rejections = pipeline.stage_filter([candidate], require_answer_match=False)
    assert kept == []
    assert rejections[0].reason == "has-input-mapping"
    assert rejections[0].stage == "filter-sampled"


def test_filter_rejects_runtime_failures_by_status():
    source = (
        "def f(x):\n"
        "    y = 1 // x\n"
        "    return y\n"
        '\ninput = {"x": 0}\noutput = f(**input)\nprint(output)\n'
    )
    pipeline = make_pipeline(workers=1)
    kept, rejections = pipeline.stage_filter(
        [_sampled(source)], require_answer_match=False
    )
    assert kept == []
    assert [r.reason for r in rejections] == ["runtime-error"]


# --- reverse, solve, verify ops ---


def test_reverse_trims_marker_scaffolding():
    reply = "thinking...\n### Math Problem:\nWhat is 2 plus 7?\n### End Problem\n"
    pipeline = make_pipeline({"reverser": reply}, workers=1)
    problem = pipeline.stage_reverse(_sampled(TEMPLATE_OK))
    assert problem.text == "What is 2 plus 7?"


def test_reverse_blank_reply_raises_empty_problem():
    pipeline = make_pipeline({"reverser": "### Math Problem:\n \n"}, workers=1)
    with pytest.raises(EmptyProblem):
        pipeline.stage_reverse(_sampled(TEMPLATE_OK))


def test_reverse_backend_miss_raises_gateway_error():
    pipeline = make_pipeline({}, workers=1)
    with pytest.raises(GatewayError):
        pipeline.stage_reverse(_sampled(TEMPLATE_OK))


def test_solve_parses_boxed_integer():
    pipeline = make_pipeline({"solver": "Add them: \\boxed{14}"}, workers=1)
    solution = pipeline.stage_solve(Problem("What is 7 plus 7?"))
    assert solution.boxed_raw == "14"
    assert solution.answer.variant is Variant.INTEGER
    assert solution.answer.value == 14


def test_solve_parses_boxed_fraction():
    pipeline = make_pipeline({"solver": "So \\boxed{\\frac{1}{4}}."}, workers=1)
    solution = pipeline.stage_solve(Problem("p"))
    assert solution.answer.variant is Variant.RATIONAL
    assert solution.answer.value == Fraction(1, 4)


def test_solve_without_boxed_answer():
    pipeline = make_pipeline({"solver": "I am not sure."}, workers=1)
    solution = pipeline.stage_solve(Problem("p"))
    assert solution.answer is None
    assert solution.boxed_raw is None


def _verify_parts(stdout="9\n", boxed="9"):
    candidate = _sampled(TEMPLATE_OK, stdout=stdout)
    solution = Solution.from_text(f"Therefore \\boxed{{{boxed}}}.")
    return Problem("What is 2 plus 7?"), solution, candidate


def test_verify_accepts_match_plus_consistent():
    pipeline = make_pipeline({"judge-consistency": "Yes"}, workers=1)
    verdict = pipeline.stage_verify(*_verify_parts())
    assert (verdict.answer_match, verdict.cot_consistent, verdict.accepted) == (
        True,
        True,
        True,
    )


def test_verify_rejects_on_judge_no():
    pipeline = make_pipeline({"judge-consistency": "No"}, workers=1)
    verdict = pipeline.stage_verify(*_verify_parts())
    assert (verdict.answer_match, verdict.cot_consistent, verdict.accepted) == (
        True,
        False,
        False,
    )


def test_verify_answer_mismatch_skips_judge():
    pipeline = make_pipeline({"judge-consistency": "Yes"}, workers=1)
    verdict = pipeline.stage_verify(*_verify_parts(stdout="8\n", boxed="14"))
    assert (verdict.answer_match, verdict.accepted) == (False, False)
    assert "judge-consistency" not in pipeline.gateway.backend.calls


def test_verify_missing_boxed_is_mismatch_without_judge():
    candidate = _sampled(TEMPLATE_OK, stdout="9\n")
    solution = Solution.from_text("no final answer here")
    pipeline = make_pipeline({"judge-consistency": "Yes"}, workers=1)
    verdict = pipeline.stage_verify(Problem("p"), solution, candidate)
    assert verdict.accepted is False
    assert "judge-consistency" not in pipeline.gateway.backend.calls


def test_verify_unparseable_judge_is_not_accepted():
    pipeline = make_pipeline({"judge-consistency": "Maybe"}, workers=1)
    verdict = pipeline.stage_verify(*_verify_parts())
    assert (verdict.answer_match, verdict.cot_consistent, verdict.accepted) == (
        True,
        False,
        False,
    )


def test_verify_executes_when_stdout_not_cached():
    candidate = _sampled(TEMPLATE_OK)  # no stdout in meta
    solution = Solution.from_text("\\boxed{9}")
    pipeline = make_pipeline({"judge-consistency": "Yes"}, workers=1)
    verdict = pipeline.stage_verify(Problem("p"), solution, candidate)
    assert verdict.accepted is True


def test_verify_tolerance_matches_decimal_rendering():
    parts = _verify_parts(stdout="5.196152422706632\n", boxed="3\\sqrt{3}")
    pipeline = make_pipeline({"judge-consistency": "Yes"}, workers=1)
    assert pipeline.stage_verify(*parts).accepted is True


# --- audit ---


def _records(n):
    from caco.model import DatasetRecord, Verdict

    out = []
    for i in range(n):
        out.append(
            DatasetRecord(
                problem=Problem(f"Case {i:02d}?"),
                solution=Solution.from_text(f"\\boxed{{{i}}}"),
                program=_sampled(template_program(i)),
                verdict=Verdict(True, True),
                lineage=(),
            )
        )
    return out


def test_audit_all_yes():
    pipeline = make_pipeline(
        {"judge-solvable": "Yes", "judge-correct": "Yes"}, workers=1
    )
    report = pipeline.stage_audit(_records(10), sample_size=10)
    assert (report.sample_size, report.solvable_yes, report.correct_yes) == (10, 10, 10)
    assert report.solvable_no == report.correct_no == report.unparseable == 0


def test_audit_alternating_verdicts():
    replies = ["Yes", "No"] * 5
    pipeline = make_pipeline(
        {"judge-solvable": {"queue": replies}, "judge-correct": "Yes"}, workers=1
    )
    report = pipeline.stage_audit(_records(10), sample_size=10)
    assert report.solvable_yes == 5
    assert report.solvable_no == 5
    assert report.correct_yes == 10


def test_audit_zero_sample_is_empty_report():
    pipeline = make_pipeline({}, workers=1)
    report = pipeline.stage_audit(_records(4), sample_size=0)
    assert report.sample_size == 0
    assert report.solvable_yes == report.correct_yes == report.unparseable == 0


def test_audit_sample_capped_at_population():
    pipeline = make_pipeline(
        {"judge-solvable": "Yes", "judge-correct": "Yes"}, workers=1
    )
    report = pipeline.stage_audit(_records(3), sample_size=32)
    assert report.sample_size == 3


def test_audit_unparseable_and_missing_scripts_are_counted():
    pipeline = make_pipeline({"judge-solvable": "Maybe"}, workers=1)
    report = pipeline.stage_audit(_records(2), sample_size=2)
    assert report.unparseable == 4  # both judges failed for both records
    assert report.solvable_yes == report.correct_yes == 0


def test_audit_seed_makes_subset_deterministic():
    pipeline = make_pipeline(
        {"judge-solvable": "Yes", "judge-correct": "Yes"}, workers=1
    )
    records = _records(20)
    first = pipeline.stage_audit(records, sample_size=5, seed=7)
    second = pipeline.stage_audit(records, sample_size=5, seed=7)
    assert first == second


# --- end-to-end funnel ---


def _scenario_pipeline(tmp_path, n_seeds=12, mismatch=(8, 9), judge_no=(10, 11), **options):
    seeds, script = dual_verification_scenario(n_seeds, mismatch, judge_no)
    seeds_path = tmp_path / "seeds.jsonl"
    seeds_path.write_text("".join(json.dumps(r) + "\n" for r in seeds), encoding="utf-8")
    options.setdefault("workers", 2)
    return make_pipeline(
        script, run_dir=tmp_path / "run", seeds_path=seeds_path, **options
    )


def test_run_all_dual_verification_counts(tmp_path):
    pipeline = _scenario_pipeline(tmp_path)
    report = pipeline.run_all()
    verify = report.stage("verify")
    assert verify.in_count == 12
    assert verify.out_count == 8
    assert verify.rejected == {"answer-mismatch": 2, "cot-inconsistent": 2}
    records = pipeline.accepted_records()
    assert len(records) == 8
    assert all(r.verdict.accepted for r in records)


def test_run_all_conservation_holds_per_stage_on_disk(tmp_path):
    pipeline = _scenario_pipeline(tmp_path)
    report = pipeline.run_all()
    run_dir = tmp_path / "run"
    for stage in report.stages:
        out_rows = load_rows(run_dir / stage.stage / "out.jsonl").rows
        rej_rows = load_rows(run_dir / stage.stage / "rejects.jsonl").rows
        assert stage.out_count == len(out_rows)
        assert stage.in_count == len(out_rows) + len(rej_rows)
        assert sum(stage.rejected.values()) == len(rej_rows)


def test_run_all_histogram_uses_known_reasons(tmp_path):
    pipeline = _scenario_pipeline(tmp_path)
    report = pipeline.run_all()
    for stage in report.stages:
        assert set(stage.rejected) <= REJECTION_REASONS


def test_run_all_judges_always_no_accepts_nothing(tmp_path):
    seeds, script = dual_verification_scenario(4, mismatch=(), judge_no=())
    script["roles"]["judge-consistency"] = {"default": "No"}
    seeds_path = tmp_path / "seeds.jsonl"
    seeds_path.write_text("".join(json.dumps(r) + "\n" for r in seeds), encoding="utf-8")
    pipeline = make_pipeline(script, run_dir=tmp_path / "run", seeds_path=seeds_path, workers=2)
    report = pipeline.run_all()
    assert report.stage("verify").out_count == 0
    assert report.stage("verify").rejected == {"cot-inconsistent": 4}
    assert pipeline.accepted_records() == []


def test_run_all_lineage_tracks_stage_path(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=3, mismatch=(), judge_no=())
    pipeline.run_all()
    for record in pipeline.accepted_records():
        stages = [entry.stage for entry in record.lineage]
        assert stages == ["unify", "filter-seed", "reverse", "solve", "verify"]
        assert all(entry.timestamp == "1970-01-01T00:00:00Z" for entry in record.lineage)


def test_run_all_stop_after_then_resume_completes(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=4, mismatch=(), judge_no=())
    partial = pipeline.run_all(stop_after="filter-seed")
    assert [s.stage for s in partial.stages] == ["unify", "filter-seed"]
    assert not (tmp_path / "run" / "verify").exists()
    full = pipeline.run_all()
    assert full.stage("verify").out_count == 4


def test_run_all_rejects_unknown_stop_stage(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=1)
    with pytest.raises(ValueError):
        pipeline.run_all(stop_after="polish")


def test_run_all_is_idempotent_in_same_directory(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=4, mismatch=(), judge_no=())
    first = pipeline.run_all()
    snapshot = {
        p.relative_to(tmp_path): p.read_bytes()
        for p in sorted((tmp_path / "run").rglob("*"))
        if p.is_file()
    }
    second = pipeline.run_all()
    assert second == first
    after = {
        p.relative_to(tmp_path): p.read_bytes()
        for p in sorted((tmp_path / "run").rglob("*"))
        if p.is_file()
    }
    assert after == snapshot


def test_run_all_k_reverse_multiplies_problem_variants(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=2, mismatch=(), judge_no=(), k_reverse=2)
    report = pipeline.run_all()
    assert report.stage("reverse").in_count == 4
    records = pipeline.accepted_records()
    assert len(records) == 4
    work_ids = {r.to_dict()["meta"]["work_id"] for r in records}
    assert len(work_ids) == 4
    assert {len({r.id for r in records})} == {2}


def test_run_all_mixed_seed_and_sampled_duplicates_collapse(tmp_path):
    # sampled draw repeats a seed program byte-for-byte except line endings
    seeds, script = dual_verification_scenario(1, mismatch=(), judge_no=())
    dup = template_program(0).replace("\n", "\r\n")
    script["roles"]["codegen"] = {"queue": ["```python\n" + dup + "```"]}
    seeds_path = tmp_path / "seeds.jsonl"
    seeds_path.write_text("".join(json.dumps(r) + "\n" for r in seeds), encoding="utf-8")
    pipeline = make_pipeline(
        script, run_dir=tmp_path / "run", seeds_path=seeds_path, sample_n=1, workers=1
    )
    report = pipeline.run_all()
    assert report.stage("filter-sampled").out_count == 1
    reverse = report.stage("reverse")
    assert reverse.rejected.get("duplicate") == 1
    assert reverse.out_count == 1
    assert len(pipeline.accepted_records()) == 1


def test_accepted_records_schema_keys(tmp_path):
    pipeline = _scenario_pipeline(tmp_path, n_seeds=1, mismatch=(), judge_no=())
    pipeline.run_all()
    row = load_rows(tmp_path / "run" / "verify" / "out.jsonl").rows[0]
    assert set(row) == {
        "id",
        "problem",
        "solution",
        "code",
        "origin",
        "meta",
        "verdict",
        "lineage",
    }
    assert row["verdict"] == {
        "answer_match": True,
        "cot_consistent": True,
        "accepted": True,
    }
