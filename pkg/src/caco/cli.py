"""Command line front end for the pipeline; exit codes: 0 ok, 1 strict partial, 2 usage."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import AppConfig, ConfigError, build_executor, build_pipeline, load_config
from .executor import ExecStatus
from .model import CandidateProgram, Origin
from .stages import STAGE_ORDER
from .store import FunnelReport, StoreError, funnel_report
from .validator import validate as run_checks

# CLI stage names map onto the last persisted stage each command must reach.
_TARGETS = {
    "unify": "filter-seed",
    "sample": "sample",
    "filter": "filter-sampled",
    "reverse": "reverse",
    "solve": "solve",
    "verify": "verify",
    "run-all": None,
}


def _common(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None, help="YAML config file."),
        click.option("--run-dir", type=click.Path(), default=None, help="Run directory for checkpoints."),
        click.option("--seeds", type=click.Path(), default=None, help="Seed problems (JSONL)."),
        click.option("--n", "sample_n", type=int, default=None, help="Number of free-form draws."),
        click.option("--workers", type=int, default=None, help="Concurrent stage workers."),
        click.option("--timeout-ms", type=int, default=None, help="Wall limit per execution."),
        click.option("--mock", "mock_script", type=click.Path(), default=None, help="Scripted backend file; implies offline mode."),
        click.option("--strict", is_flag=True, default=False, help="Exit 1 when anything was rejected."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load(config_path, run_dir, seeds, sample_n, workers, timeout_ms, mock_script) -> AppConfig:
    overrides = {
        "pipeline.run_dir": run_dir,
        "pipeline.seeds": seeds,
        "pipeline.sample_n": sample_n,
        "pipeline.workers": workers,
        "executor.wall_ms": timeout_ms,
        "gateway.backend": "mock" if mock_script else None,
        "gateway.mock_script": mock_script,
    }
    try:
        return load_config(config_path, overrides=overrides)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc


def _echo_pairs(pairs) -> None:
    click.echo(" ".join(f"{key}={value}" for key, value in pairs))


def _finish(report: FunnelReport, strict: bool) -> None:
    _echo_pairs(report.summary_pairs())
    rejected = sum(sum(stage.rejected.values()) for stage in report.stages)
    if strict and rejected > 0:
        sys.exit(1)


def _run_to(target: str | None, strict: bool, **kwargs) -> None:
    config = _load(**kwargs)
    if config.pipeline.run_dir is None:
        raise click.UsageError("a run directory is required (--run-dir or pipeline.run_dir)")
    pipeline = build_pipeline(config)
    try:
        report = pipeline.run_all(stop_after=target)
    except (StoreError, OSError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc
    _finish(report, strict)


def _stage_command(name: str) -> click.Command:
    @click.command(name=name, help=f"Run the pipeline through the {name} stage.")
    @_common
    def command(strict, **kwargs):
        _run_to(_TARGETS[name], strict, **kwargs)

    return command


@click.group(context_settings={"auto_envvar_prefix": "CACO"})
def main() -> None:
    """Synthesize verified problem/solution/code records from executable templates."""


for _name in ("unify", "sample", "filter", "reverse", "solve", "verify", "run-all"):
    main.add_command(_stage_command(_name))


@main.command()
@_common
@click.option("--sample", "size", type=int, default=32, show_default=True, help="Records to audit.")
@click.option("--seed", type=int, default=None, help="Sampling seed for the audit draw.")
def audit(strict, size, seed, **kwargs):
    """Judge solvability and correctness over a sample of accepted records."""
    config = _load(**kwargs)
    if config.pipeline.run_dir is None:
        raise click.UsageError("a run directory is required (--run-dir or pipeline.run_dir)")
    pipeline = build_pipeline(config)
    try:
        records = pipeline.accepted_records()
    except OSError as exc:
        raise click.UsageError(str(exc)) from exc
    report = pipeline.stage_audit(records, size, seed=seed)
    _echo_pairs(
        [
            ("records", len(records)),
            ("size", report.sample_size),
            ("solvable_yes", report.solvable_yes),
            ("solvable_no", report.solvable_no),
            ("correct_yes", report.correct_yes),
            ("correct_no", report.correct_no),
            ("unparseable", report.unparseable),
        ]
    )
    if strict and (report.solvable_no or report.correct_no or report.unparseable):
        sys.exit(1)


@main.command()
@_common
def stats(strict, **kwargs):
    """Report the stage funnel from checkpoints without running anything."""
    config = _load(**kwargs)
    if config.pipeline.run_dir is None:
        raise click.UsageError("a run directory is required (--run-dir or pipeline.run_dir)")
    try:
        report = funnel_report(config.pipeline.run_dir, STAGE_ORDER)
    except StoreError as exc:
        raise click.UsageError(str(exc)) from exc
    _finish(report, strict)


@main.command(name="validate-one")
@click.option("--file", "source_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--min-lines", type=int, default=6, show_default=True)
@click.option("--strict", is_flag=True, default=False, help="Exit 1 when a check fails.")
def validate_one(source_file, min_lines, strict):
    """Run the static checks against one candidate source file."""
    source = Path(source_file).read_text(encoding="utf-8")
    report = run_checks(source, min_lines=min_lines)
    for check in report.checks:
        detail = f" detail={check.detail!r}" if check.detail and not check.passed else ""
        click.echo(f"check={check.check} passed={str(check.passed).lower()}{detail}")
    _echo_pairs([("passed", str(report.passed).lower()), ("failed", report.first_failed() or "-")])
    if strict and not report.passed:
        sys.exit(1)


@main.command(name="exec-one")
@click.option("--file", "source_file", type=click.Path(exists=True, dir_okay=False), required=True)
@_common
@click.option("--instrumented", is_flag=True, default=False, help="Run through the shim.")
def exec_one(source_file, strict, instrumented, **kwargs):
    """Execute one candidate source file inside the sandbox."""
    config = _load(**kwargs)
    executor = build_executor(config)
    source = Path(source_file).read_text(encoding="utf-8")
    candidate = CandidateProgram(source=source, origin=Origin.SAMPLED, meta={})
    if instrumented:
        result = executor.execute_instrumented(candidate)
    else:
        result = executor.execute_plain(candidate)
    last_line = result.stdout.strip().splitlines()[-1] if result.stdout.strip() else ""
    pairs = [
        ("status", result.status.value),
        ("exit_code", result.exit_code),
        ("duration_ms", result.duration_ms),
        ("truncated", str(result.stdout_truncated).lower()),
        ("last_line", repr(last_line)),
    ]
    if result.exception is not None:
        pairs.append(("exception", result.exception.class_name))
    _echo_pairs(pairs)
    if strict and result.status is not ExecStatus.OK:
        sys.exit(1)


if __name__ == "__main__":
    main()
