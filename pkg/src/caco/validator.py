"""Static template checks for candidate programs. Analysis only: never executes code."""

from __future__ import annotations

import ast
from dataclasses import dataclass
from enum import Enum

from .model import CheckResult, StructuralFacts, ValidationReport

DEFAULT_MIN_LINES = 6


class CheckId(str, Enum):
    SYNTAX_OK = "syntax-ok"
    HAS_INPUT_MAPPING = "has-input-mapping"
    CALLS_WITH_INPUT = "calls-with-input"
    ASSIGNS_OUTPUT = "assigns-output"
    PRINTS_OUTPUT = "prints-output"
    MIN_LINES = "min-lines"
    KEYS_USED = "keys-used"


CHECK_ORDER: tuple[CheckId, ...] = tuple(CheckId)


def count_noncomment_lines(source: str) -> int:
    """Lines that are neither blank nor comment-only; inline trailing comments still count."""
    count = 0
    for line in source.splitlines():
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            count += 1
    return count


@dataclass(frozen=True)
class _Analysis:
    has_input_mapping: bool
    input_keys: tuple[str, ...]
    called_function: str | None
    assigns_output: bool
    has_output_print: bool
    unused_keys: tuple[str, ...]


def _assign_targets(node: ast.stmt) -> list[ast.expr]:
    if isinstance(node, ast.Assign):
        return node.targets
    if isinstance(node, ast.AnnAssign) and node.value is not None:
        return [node.target]
    return []


def _assigned_value(node: ast.stmt) -> ast.expr | None:
    if isinstance(node, (ast.Assign, ast.AnnAssign)):
        return node.value
    return None


def _input_mapping(tree: ast.Module) -> ast.Dict | None:
    # Last module-level `input = {...}` wins; non-dict assignments do not count.
    found = None
    for stmt in tree.body:
        value = _assigned_value(stmt)
        if value is None or not isinstance(value, ast.Dict):
            continue
        for target in _assign_targets(stmt):
            if isinstance(target, ast.Name) and target.id == "input":
                found = value
    return found


def _mapping_keys(mapping: ast.Dict) -> tuple[str, ...]:
    keys: list[str] = []
    for key in mapping.keys:
        if key is None or not isinstance(key, ast.Constant):
            continue
        text = key.value if isinstance(key.value, str) else str(key.value)
        if text not in keys:
            keys.append(text)
    return tuple(keys)


def _spreads_input(call: ast.Call) -> bool:
    return any(
        kw.arg is None and isinstance(kw.value, ast.Name) and kw.value.id == "input"
        for kw in call.keywords
    )


def _called_function(tree: ast.Module) -> str | None:
    # The function invoked as `output = f(**input)`; last such binding wins.
    found = None
    for stmt in tree.body:
        value = _assigned_value(stmt)
        if not isinstance(value, ast.Call) or not _spreads_input(value):
            continue
        if not any(
            isinstance(t, ast.Name) and t.id == "output" for t in _assign_targets(stmt)
        ):
            continue
        found = ast.unparse(value.func)
    return found


def _assigns_output(tree: ast.Module) -> bool:
    for stmt in tree.body:
        for target in _assign_targets(stmt):
            if isinstance(target, ast.Name) and target.id == "output":
                return True
    return False


def _has_output_print(tree: ast.Module) -> bool:
    for node in ast.walk(tree):
        if not isinstance(node, ast.Expr) or not isinstance(node.value, ast.Call):
            continue
        call = node.value
        if not (isinstance(call.func, ast.Name) and call.func.id == "print"):
            continue
        if call.keywords:
            continue
        if len(call.args) == 1 and isinstance(call.args[0], ast.Name):
            if call.args[0].id == "output":
                return True
    return False


def _explicit_key_reads(tree: ast.Module) -> set[str]:
    reads: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Subscript):
            if isinstance(node.value, ast.Name) and node.value.id == "input":
                if isinstance(node.slice, ast.Constant):
                    reads.add(str(node.slice.value))
        elif isinstance(node, ast.Call):
            func = node.func
            if (
                isinstance(func, ast.Attribute)
                and func.attr == "get"
                and isinstance(func.value, ast.Name)
                and func.value.id == "input"
                and node.args
                and isinstance(node.args[0], ast.Constant)
            ):
                reads.add(str(node.args[0].value))
    return reads


def _find_function(tree: ast.Module, name: str | None) -> ast.FunctionDef | None:
    if name is None:
        return None
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == name:
            return node
    return None


def _unused_keys(tree: ast.Module, keys: tuple[str, ...]) -> tuple[str, ...]:
    if not keys:
        return ()
    reads = _explicit_key_reads(tree)
    func_name = _called_function(tree)
    fdef = _find_function(tree, func_name)
    if fdef is None and func_name is not None:
        # Callee body is not visible (imported or builtin): cannot disprove use.
        return ()
    params: set[str] = set()
    body_names: set[str] = set()
    catch_all_used = False
    if fdef is not None:
        args = fdef.args
        params = {a.arg for a in (*args.posonlyargs, *args.args, *args.kwonlyargs)}
        for stmt in fdef.body:
            for node in ast.walk(stmt):
                if isinstance(node, ast.Name):
                    body_names.add(node.id)
        catch_all_used = args.kwarg is not None and args.kwarg.arg in body_names
    unused = []
    for key in keys:
        if key in reads or catch_all_used:
            continue
        if key in params and key in body_names:
            continue
        unused.append(key)
    return tuple(unused)


def _analyze(tree: ast.Module) -> _Analysis:
    mapping = _input_mapping(tree)
    keys = _mapping_keys(mapping) if mapping is not None else ()
    return _Analysis(
        has_input_mapping=mapping is not None,
        input_keys=keys,
        called_function=_called_function(tree),
        assigns_output=_assigns_output(tree),
        has_output_print=_has_output_print(tree),
        unused_keys=_unused_keys(tree, keys),
    )


def parse_structure(source: str) -> StructuralFacts:
    """Structural facts for a syntactically valid program. Raises SyntaxError otherwise."""
    analysis = _analyze(ast.parse(source))
    return StructuralFacts(
        input_keys=analysis.input_keys,
        called_function=analysis.called_function,
        noncomment_lines=count_noncomment_lines(source),
        has_output_print=analysis.has_output_print,
    )


def unused_input_keys(source: str) -> list[str]:
    """Input keys never bound to a used parameter nor read from the mapping."""
    tree = ast.parse(source)
    mapping = _input_mapping(tree)
    keys = _mapping_keys(mapping) if mapping is not None else ()
    return list(_unused_keys(tree, keys))


def validate(source: str, min_lines: int = DEFAULT_MIN_LINES) -> ValidationReport:
    """Run every template check in declaration order. Never executes the program."""
    lines = count_noncomment_lines(source)
    checks: list[CheckResult] = []
    try:
        tree = ast.parse(source)
        checks.append(CheckResult(CheckId.SYNTAX_OK.value, True))
    except SyntaxError as exc:
        tree = None
        checks.append(
            CheckResult(CheckId.SYNTAX_OK.value, False, f"line {exc.lineno}: {exc.msg}")
        )

    if tree is None:
        skipped = "not evaluated: syntax error"
        for check_id in (
            CheckId.HAS_INPUT_MAPPING,
            CheckId.CALLS_WITH_INPUT,
            CheckId.ASSIGNS_OUTPUT,
            CheckId.PRINTS_OUTPUT,
        ):
            checks.append(CheckResult(check_id.value, False, skipped))
        checks.append(
            CheckResult(CheckId.MIN_LINES.value, lines >= min_lines, f"{lines} of {min_lines}")
        )
        checks.append(CheckResult(CheckId.KEYS_USED.value, False, skipped))
        facts = StructuralFacts((), None, lines, False)
        return ValidationReport(tuple(checks), False, facts)

    analysis = _analyze(tree)
    checks.append(
        CheckResult(
            CheckId.HAS_INPUT_MAPPING.value,
            analysis.has_input_mapping,
            "" if analysis.has_input_mapping else "no top-level `input = {...}`",
        )
    )
    checks.append(
        CheckResult(
            CheckId.CALLS_WITH_INPUT.value,
            analysis.called_function is not None,
            analysis.called_function or "no `output = f(**input)` binding",
        )
    )
    checks.append(
        CheckResult(
            CheckId.ASSIGNS_OUTPUT.value,
            analysis.assigns_output,
            "" if analysis.assigns_output else "no assignment to `output`",
        )
    )
    checks.append(
        CheckResult(
            CheckId.PRINTS_OUTPUT.value,
            analysis.has_output_print,
            "" if analysis.has_output_print else "no statement-level `print(output)`",
        )
    )
    checks.append(
        CheckResult(CheckId.MIN_LINES.value, lines >= min_lines, f"{lines} of {min_lines}")
    )
    checks.append(
        CheckResult(
            CheckId.KEYS_USED.value,
            not analysis.unused_keys,
            ", ".join(analysis.unused_keys),
        )
    )
    facts = StructuralFacts(
        input_keys=analysis.input_keys,
        called_function=analysis.called_function,
        noncomment_lines=lines,
        has_output_print=analysis.has_output_print,
    )
    passed = all(c.passed for c in checks)
    return ValidationReport(tuple(checks), passed, facts)
