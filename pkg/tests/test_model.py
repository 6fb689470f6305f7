import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from caco.model import (
    CandidateProgram,
    DatasetRecord,
    ExceptionInfo,
    ExecStatus,
    ExecutionResult,
    LineageEntry,
    Origin,
    Problem,
    SamplingParams,
    Solution,
    Verdict,
    dumps_record,
    loads_record,
    normalize_source,
    program_id,
)
from conftest import GOLDEN_DIR, golden_labels

# sha256 of b"" and b"print(1)", computed with the stdlib hash directly.
EMPTY_DIGEST = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
PRINT1_DIGEST = "d287bb7f9d15abdc5b6e98536263815744b6ef21c8f3c839fc434ca70d8efe99"


def test_program_id_empty_source():
    assert program_id("") == EMPTY_DIGEST


def test_program_id_deterministic():
    source = "x = 1\nprint(x)\n"
    assert program_id(source) == program_id(source)


def test_program_id_newline_normalization():
    assert program_id("print(1)\r\n") == PRINT1_DIGEST
    assert program_id("print(1)\n") == PRINT1_DIGEST
    assert program_id("print(1)") == PRINT1_DIGEST


def test_normalize_source_drops_trailing_blank_lines():
    assert normalize_source("a = 1\n\n   \n") == "a = 1"
    assert normalize_source("a = 1\r\nb = 2\r") == "a = 1\nb = 2"


def test_program_id_injective_on_golden_corpus():
    sources = [(GOLDEN_DIR / e["file"]).read_text() for e in golden_labels()]
    ids = [program_id(s) for s in sources]
    assert len(set(ids)) == len(set(normalize_source(s) for s in sources))


def _record(source="x = 1\nprint(x)\n", problem="What is 1?", solution_text=r"It is \boxed{1}."):
    return DatasetRecord(
        problem=Problem(problem),
        solution=Solution.from_text(solution_text),
        program=CandidateProgram(source=source, origin=Origin.SEED_MATH, meta={"k": 1}),
        verdict=Verdict(True, True),
        lineage=(LineageEntry("unify", "1970-01-01T00:00:00Z"),),
    )


def test_roundtrip_minimal_record():
    record = DatasetRecord(
        problem=Problem("p"),
        solution=Solution.from_text("no boxed group"),
        program=CandidateProgram(source="print(0)", origin=Origin.SAMPLED),
        verdict=Verdict(False, False),
    )
    again = DatasetRecord.from_dict(loads_record(dumps_record(record.to_dict())))
    assert again == record


def test_roundtrip_non_ascii():
    record = _record(problem="Evaluate √3 + π", solution_text="√3 ≈ 1.732, \\boxed{\\pi}")
    again = DatasetRecord.from_dict(loads_record(dumps_record(record.to_dict())))
    assert again == record
    assert "√3" in dumps_record(record.to_dict())


def test_roundtrip_long_source():
    source = "\n".join(f"v{i} = {i}" for i in range(1000)) + "\nprint(v999)\n"
    assert len(source) > 10_000
    record = _record(source=source)
    again = DatasetRecord.from_dict(loads_record(dumps_record(record.to_dict())))
    assert again == record


def test_record_dict_field_names():
    data = _record().to_dict()
    assert set(data) == {"id", "problem", "solution", "code", "origin", "meta", "verdict", "lineage"}
    assert set(data["verdict"]) == {"answer_match", "cot_consistent", "accepted"}
    assert data["id"] == program_id(data["code"])


def test_loads_record_rejects_non_object():
    with pytest.raises(ValueError):
        loads_record("[1, 2]")


def test_verdict_accepted_is_conjunction():
    for a, c in itertools.product([True, False], repeat=2):
        assert Verdict(a, c).accepted == (a and c)
    with pytest.raises(ValueError):
        Verdict(True, False, accepted=True)
    with pytest.raises(ValueError):
        Verdict(True, True, accepted=False)


def test_candidate_id_recomputed_not_trusted():
    candidate = CandidateProgram.from_dict(
        {"id": "bogus", "source": "print(2)", "origin": "sampled", "meta": {}}
    )
    assert candidate.id == program_id("print(2)")


def test_candidate_rejects_bad_solve_rate():
    with pytest.raises(ValueError):
        CandidateProgram(source="x", origin=Origin.SAMPLED, meta={"solve_rate": 1.5})
    CandidateProgram(source="x", origin=Origin.SAMPLED, meta={"solve_rate": 1.0})


def test_execution_result_ok_requires_exit_zero():
    with pytest.raises(ValueError):
        ExecutionResult(status=ExecStatus.OK, exit_code=1)
    result = ExecutionResult(status=ExecStatus.RUNTIME_ERROR, exit_code=1,
                             exception=ExceptionInfo("ValueError", "bad"))
    data = result.to_dict()
    assert data["exception"] == {"class": "ValueError", "message": "bad"}
    assert ExecutionResult.from_dict(data) == result


def test_solution_requires_answer_iff_boxed():
    with pytest.raises(ValueError):
        Solution(text="t", boxed_raw="1", answer=None)
    plain = Solution.from_text("no final answer here")
    assert plain.answer is None and plain.boxed_raw is None


def test_sampling_params_bounds():
    SamplingParams(temperature=0.0, top_p=1.0, top_k=0, min_p=0.0, max_tokens=1)
    with pytest.raises(ValueError):
        SamplingParams(top_p=0.0)
    with pytest.raises(ValueError):
        SamplingParams(temperature=-0.1)
    with pytest.raises(ValueError):
        SamplingParams(max_tokens=0)
    with pytest.raises(ValueError):
        SamplingParams(min_p=1.0)


@given(
    st.text(
        alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"),
        max_size=200,
    )
)
def test_program_id_ignores_line_ending_flavor(body):
    assert program_id(body.replace("\n", "\r\n")) == program_id(body)


@given(st.booleans(), st.booleans())
def test_verdict_roundtrip(a, c):
    verdict = Verdict(a, c)
    assert Verdict.from_dict(verdict.to_dict()) == verdict
