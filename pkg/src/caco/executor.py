"""Subprocess sandbox: wall-clock kill, stdout caps, reduced environment, shim protocol."""

from __future__ import annotations

import json
import math
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

from .model import CandidateProgram, ExceptionInfo, ExecStatus, ExecutionResult

DEFAULT_WALL_MS = 10_000
DEFAULT_MEMORY_BYTES = 512 * 2**20
DEFAULT_MAX_STDOUT_BYTES = 64 * 2**10
DEFAULT_ENV_ALLOWLIST = (
    "PATH",
    "HOME",
    "LANG",
    "LC_ALL",
    "LC_CTYPE",
    "TMPDIR",
    "TMP",
    "TEMP",
    "PYTHONDONTWRITEBYTECODE",
    "PYTHONIOENCODING",
    "PYTHONHASHSEED",
)
TMP_ROOT_ENV = "CACO_TMP_ROOT"
KILL_GRACE_MS = 1500

SHIM_SENTINEL = "\x1e---SHIM-RESULT---\x1e"
SHIM_RESULT_FD = 3
_SHIM_READ_CAP = 16 * 2**20


@dataclass(frozen=True)
class ExecLimits:
    wall_ms: int = DEFAULT_WALL_MS
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    max_stdout_bytes: int = DEFAULT_MAX_STDOUT_BYTES
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST

    def __post_init__(self) -> None:
        if self.wall_ms <= 0 or self.memory_bytes <= 0 or self.max_stdout_bytes <= 0:
            raise ValueError("limits must be positive")
        object.__setattr__(self, "env_allowlist", tuple(self.env_allowlist))


def _source_of(program: CandidateProgram | str) -> str:
    return program.source if isinstance(program, CandidateProgram) else program


def _drain(stream, cap: int, sink: dict) -> None:
    # Keep at most cap bytes but always read to EOF so the child never blocks on a full pipe.
    kept = bytearray()
    total = 0
    while True:
        chunk = stream.read(65536)
        if not chunk:
            break
        total += len(chunk)
        if len(kept) < cap:
            kept.extend(chunk[: cap - len(kept)])
    sink["data"] = bytes(kept)
    sink["total"] = total


_fd3_lock = threading.Lock()
_fd3_anchored = False


def _ensure_fd3_open() -> None:
    # pass_fds=(3,) needs descriptor 3 open in the parent at fork time; park
    # devnull there once if it is currently free so pipe fds never claim it.
    global _fd3_anchored
    with _fd3_lock:
        if _fd3_anchored:
            return
        try:
            os.fstat(SHIM_RESULT_FD)
        except OSError:
            fd = os.open(os.devnull, os.O_RDWR)
            if fd != SHIM_RESULT_FD:
                os.dup2(fd, SHIM_RESULT_FD, inheritable=False)
                os.close(fd)
        _fd3_anchored = True


def _make_preexec(memory_bytes: int, dup_fd: int | None):
    def preexec() -> None:
        try:
            import resource

            resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, memory_bytes))
            resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        except Exception:
            pass
        if dup_fd is not None:
            os.dup2(dup_fd, SHIM_RESULT_FD)

    return preexec


@dataclass
class SandboxExecutor:
    """Runs candidate programs in short-lived subprocesses under hard limits."""

    interpreter: tuple[str, ...] = (sys.executable, "-I")
    shim_cmd: tuple[str, ...] | None = None
    limits: ExecLimits = field(default_factory=ExecLimits)
    tmp_root: str | None = None

    def _tmp_dir(self) -> str:
        root = self.tmp_root or os.environ.get(TMP_ROOT_ENV) or None
        return tempfile.mkdtemp(prefix="caco-exec-", dir=root)

    def _child_env(self, limits: ExecLimits, tmp: str) -> dict[str, str]:
        allow = set(limits.env_allowlist)
        env = {name: os.environ[name] for name in limits.env_allowlist if name in os.environ}
        for name, value in (
            ("TMPDIR", tmp),
            ("HOME", tmp),
            ("PYTHONDONTWRITEBYTECODE", "1"),
            ("PYTHONIOENCODING", "utf-8"),
        ):
            if name in allow:
                env[name] = value
        return env

    def execute_plain(
        self, program: CandidateProgram | str, limits: ExecLimits | None = None
    ) -> ExecutionResult:
        """Run the program directly under the configured interpreter."""
        limits = limits or self.limits
        raw = self._spawn(list(self.interpreter), program, limits, use_result_fd=False)
        if raw.spawn_error is not None:
            return ExecutionResult(
                status=ExecStatus.SETUP_ERROR,
                duration_ms=raw.duration_ms,
                exception=ExceptionInfo("SpawnError", raw.spawn_error),
            )
        stdout = raw.stdout_bytes.decode("utf-8", errors="replace")
        truncated = raw.stdout_total > limits.max_stdout_bytes
        if raw.timed_out:
            return ExecutionResult(
                status=ExecStatus.TIMEOUT,
                stdout=stdout,
                stdout_truncated=truncated,
                duration_ms=raw.duration_ms,
            )
        if truncated:
            return ExecutionResult(
                status=ExecStatus.OUTPUT_OVERFLOW,
                stdout=stdout,
                stdout_truncated=True,
                duration_ms=raw.duration_ms,
                exit_code=raw.exit_code,
            )
        if raw.exit_code != 0:
            return ExecutionResult(
                status=ExecStatus.RUNTIME_ERROR,
                stdout=stdout,
                duration_ms=raw.duration_ms,
                exit_code=raw.exit_code,
            )
        return ExecutionResult(
            status=ExecStatus.OK,
            stdout=stdout,
            duration_ms=raw.duration_ms,
            exit_code=raw.exit_code,
        )

    def execute_instrumented(
        self, program: CandidateProgram | str, limits: ExecLimits | None = None
    ) -> ExecutionResult:
        """Run the program through the shim; exception details come from its report."""
        limits = limits or self.limits
        if not self.shim_cmd:
            return ExecutionResult(
                status=ExecStatus.SETUP_ERROR,
                exception=ExceptionInfo("ShimSetupError", "no shim command configured"),
            )
        raw = self._spawn(list(self.shim_cmd), program, limits, use_result_fd=True)
        if raw.spawn_error is not None:
            return ExecutionResult(
                status=ExecStatus.SETUP_ERROR,
                duration_ms=raw.duration_ms,
                exception=ExceptionInfo("ShimSetupError", raw.spawn_error),
            )
        if raw.timed_out:
            stdout = raw.stdout_bytes.decode("utf-8", errors="replace")
            sentinel_at = stdout.rfind(SHIM_SENTINEL)
            if sentinel_at >= 0:
                stdout = stdout[:sentinel_at]
            return ExecutionResult(
                status=ExecStatus.TIMEOUT,
                stdout=stdout,
                stdout_truncated=raw.stdout_total > limits.max_stdout_bytes,
                duration_ms=raw.duration_ms,
            )
        report = _parse_shim_report(raw)
        if report is None:
            return ExecutionResult(
                status=ExecStatus.SETUP_ERROR,
                duration_ms=raw.duration_ms,
                exit_code=raw.exit_code,
                exception=ExceptionInfo("ShimSetupError", "shim handshake absent or malformed"),
            )
        stdout_full = report.get("stdout") or ""
        encoded = stdout_full.encode("utf-8")
        truncated = len(encoded) > limits.max_stdout_bytes
        stdout = (
            encoded[: limits.max_stdout_bytes].decode("utf-8", errors="replace")
            if truncated
            else stdout_full
        )
        ok = bool(report.get("ok"))
        exc_class = report.get("exception_class")
        exception = (
            ExceptionInfo(exc_class, report.get("exception_message") or "") if exc_class else None
        )
        if ok and truncated:
            return ExecutionResult(
                status=ExecStatus.OUTPUT_OVERFLOW,
                stdout=stdout,
                stdout_truncated=True,
                duration_ms=raw.duration_ms,
                exit_code=raw.exit_code,
            )
        if not ok:
            status = ExecStatus.SETUP_ERROR if exc_class == "ShimSetupError" else ExecStatus.RUNTIME_ERROR
            exit_code = raw.exit_code if raw.exit_code != 0 else 1
            return ExecutionResult(
                status=status,
                stdout=stdout,
                stdout_truncated=truncated,
                duration_ms=raw.duration_ms,
                exit_code=exit_code,
                exception=exception,
            )
        return ExecutionResult(
            status=ExecStatus.OK,
            stdout=stdout,
            duration_ms=raw.duration_ms,
            exit_code=0 if raw.exit_code == 0 else raw.exit_code,
        )

    def _spawn(
        self,
        command: list[str],
        program: CandidateProgram | str,
        limits: ExecLimits,
        use_result_fd: bool,
    ) -> "_RawRun":
        tmp = self._tmp_dir()
        start = time.monotonic()
        result_read = result_write = None
        proc = None
        try:
            path = os.path.join(tmp, "candidate.py")
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(_source_of(program))
            env = self._child_env(limits, tmp)
            dup_fd = None
            if use_result_fd:
                _ensure_fd3_open()
                result_read, result_write = os.pipe()
                dup_fd = result_write
            try:
                proc = subprocess.Popen(
                    [*command, path],
                    cwd=tmp,
                    env=env,
                    stdin=subprocess.DEVNULL,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    start_new_session=True,
                    pass_fds=(SHIM_RESULT_FD,) if use_result_fd else (),
                    preexec_fn=_make_preexec(limits.memory_bytes, dup_fd),
                )
            except (OSError, ValueError) as exc:
                return _RawRun(
                    spawn_error=str(exc),
                    duration_ms=_elapsed_ms(start),
                )
            if result_write is not None:
                os.close(result_write)
                result_write = None

            stdout_sink: dict = {"data": b"", "total": 0}
            reader = threading.Thread(
                target=_drain,
                args=(proc.stdout, limits.max_stdout_bytes, stdout_sink),
                daemon=True,
            )
            reader.start()

            fd_sink: dict = {"data": b"", "total": 0}
            fd_reader = None
            if result_read is not None:
                fd_stream = os.fdopen(result_read, "rb")
                result_read = None
                fd_reader = threading.Thread(
                    target=_drain, args=(fd_stream, _SHIM_READ_CAP, fd_sink), daemon=True
                )
                fd_reader.start()

            timed_out = False
            try:
                proc.wait(timeout=limits.wall_ms / 1000.0)
            except subprocess.TimeoutExpired:
                timed_out = True
                _kill_group(proc)
                proc.wait()
            # One shared budget keeps the whole call inside wall_ms + grace.
            join_deadline = start + (limits.wall_ms + KILL_GRACE_MS) / 1000.0 - 0.2
            reader.join(timeout=max(0.05, join_deadline - time.monotonic()))
            if fd_reader is not None:
                fd_reader.join(timeout=max(0.05, join_deadline - time.monotonic()))
            duration = _elapsed_ms(start)
            if timed_out and duration < limits.wall_ms:
                duration = limits.wall_ms
            return _RawRun(
                stdout_bytes=stdout_sink["data"],
                stdout_total=stdout_sink["total"],
                result_bytes=fd_sink["data"],
                exit_code=proc.returncode,
                timed_out=timed_out,
                duration_ms=duration,
            )
        finally:
            for fd in (result_read, result_write):
                if fd is not None:
                    try:
                        os.close(fd)
                    except OSError:
                        pass
            if proc is not None and proc.stdout is not None:
                proc.stdout.close()
            shutil.rmtree(tmp, ignore_errors=True)


@dataclass
class _RawRun:
    stdout_bytes: bytes = b""
    stdout_total: int = 0
    result_bytes: bytes = b""
    exit_code: int | None = None
    timed_out: bool = False
    duration_ms: int = 0
    spawn_error: str | None = None


def _elapsed_ms(start: float) -> int:
    return int(math.ceil((time.monotonic() - start) * 1000))


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            proc.kill()
        except ProcessLookupError:
            pass


def _parse_shim_report(raw: _RawRun) -> dict | None:
    payload = raw.result_bytes.decode("utf-8", errors="replace").strip()
    if not payload:
        text = raw.stdout_bytes.decode("utf-8", errors="replace")
        at = text.rfind(SHIM_SENTINEL)
        if at < 0:
            return None
        payload = text[at + len(SHIM_SENTINEL) :].strip()
    try:
        report = json.loads(payload.splitlines()[0]) if payload else None
    except (json.JSONDecodeError, IndexError):
        return None
    if not isinstance(report, dict) or "ok" not in report:
        return None
    return report
