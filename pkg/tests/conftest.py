"""Shared fixtures: golden corpus access, mock scripts, and pipeline builders."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from caco.executor import SandboxExecutor
from caco.gateway import Gateway, MockBackend
from caco.stages import Pipeline, PipelineOptions

GOLDEN_DIR = Path(__file__).parent / "golden"

# Minimal conformant template program: six non-comment lines, one input key.
TEMPLATE_OK = """\
def combine(a, b):
    total = a + b
    return total

input = {"a": 2, "b": 7}
output = combine(**input)
print(output)
"""


def template_program(a: int, b: int = 7) -> str:
    return TEMPLATE_OK.replace('"a": 2', f'"a": {a}').replace('"b": 7', f'"b": {b}')


def golden_labels() -> list[dict]:
    return json.loads((GOLDEN_DIR / "labels.json").read_text(encoding="utf-8"))["corpus"]


def golden_source(name: str) -> str:
    return (GOLDEN_DIR / name).read_text(encoding="utf-8")


def make_pipeline(script: dict | None = None, **options) -> Pipeline:
    backend = MockBackend(script or {})
    return Pipeline(
        Gateway(backend),
        SandboxExecutor(),
        PipelineOptions(deterministic_clock=True, **options),
    )


def dual_verification_scenario(n_seeds: int = 12, mismatch: tuple = (8, 9), judge_no: tuple = (10, 11)):
    """Seed rows plus a mock script: every seed survives filtering, then the
    listed cases are rejected at verify (boxed answer off, or judge answering No)."""
    seeds = []
    fenced = []
    for i in range(n_seeds):
        seeds.append(
            {
                "kind": "math",
                "problem": f"Case {i:02d}: what is {i} plus 7?",
                "solution": f"Adding gives {i + 7}.",
                "ground_truth": str(i + 7),
            }
        )
        fenced.append("```python\n" + template_program(i) + "```")
    unify_rules = [
        {"contains": f"Case {i:02d}", "reply": fenced[i]} for i in range(n_seeds)
    ]
    reverse_rules = [
        {
            "contains": f'"a": {i},',
            "reply": f"### Math Problem:\nCase {i:02d}: what is {i} plus 7?",
        }
        for i in range(n_seeds)
    ]
    solve_rules = []
    for i in range(n_seeds):
        boxed = 999 if i in mismatch else i + 7
        solve_rules.append(
            {
                "contains": f"Case {i:02d}",
                "reply": f"Case {i:02d} reasoning gives \\boxed{{{boxed}}}.",
            }
        )
    judge_rules = [{"contains": f"Case {i:02d}", "reply": "No"} for i in judge_no]
    script = {
        "roles": {
            "unifier-math": {"rules": unify_rules},
            "reverser": {"rules": reverse_rules},
            "solver": {"rules": solve_rules},
            "judge-consistency": {"rules": judge_rules, "default": "Yes"},
            "judge-solvable": {"default": "Yes"},
            "judge-correct": {"default": "Yes"},
        }
    }
    return seeds, script


def write_scenario(tmp_path: Path, seeds: list[dict], script: dict) -> tuple[Path, Path]:
    import yaml

    seeds_path = tmp_path / "seeds.jsonl"
    seeds_path.write_text(
        "".join(json.dumps(row) + "\n" for row in seeds), encoding="utf-8"
    )
    script_path = tmp_path / "mock.yaml"
    script_path.write_text(yaml.safe_dump(script), encoding="utf-8")
    return seeds_path, script_path


@pytest.fixture
def pipeline_factory(tmp_path):
    def factory(script: dict | None = None, seeds: list[dict] | None = None, **options):
        run_dir = tmp_path / "run"
        if seeds is not None:
            seeds_path = tmp_path / "seeds.jsonl"
            seeds_path.write_text(
                "".join(json.dumps(row) + "\n" for row in seeds), encoding="utf-8"
            )
            options.setdefault("seeds_path", seeds_path)
        options.setdefault("run_dir", run_dir)
        return make_pipeline(script, **options)

    return factory
