"""Runs one candidate program and reports a structured result to the supervisor.

The supervisor hands us descriptor 3 as the result channel. We claim it
before the candidate code runs (dup + close) so the candidate can neither
read nor clobber it; if the descriptor was never provided, the result goes
to stdout after a sentinel line instead. Exactly one result is emitted per
invocation, whatever the candidate does.
"""

import io
import json
import os
import random
import sys
import time

SENTINEL = "\x1e---SHIM-RESULT---\x1e"
RESULT_FD = 3


class _Tee(io.TextIOBase):
    """Forward candidate prints to the real stdout while keeping a full copy."""

    def __init__(self, *sinks):
        self._sinks = sinks

    def writable(self):
        return True

    def write(self, text):
        for sink in self._sinks:
            sink.write(text)
        return len(text)

    def flush(self):
        for sink in self._sinks:
            try:
                sink.flush()
            except (ValueError, OSError):
                pass


def _elapsed_ms(started: float) -> int:
    return max(0, int((time.monotonic() - started) * 1000))


def shim_run(candidate_path: str) -> dict:
    """Execute the candidate in a fresh namespace; always return one result dict."""
    started = time.monotonic()
    try:
        with open(candidate_path, "r", encoding="utf-8") as handle:
            source = handle.read()
    except (OSError, UnicodeDecodeError) as exc:
        return {
            "ok": False,
            "stdout": "",
            "exception_class": "ShimSetupError",
            "exception_message": str(exc),
            "duration_ms": _elapsed_ms(started),
        }

    random.seed(0)
    captured = io.StringIO()
    original = sys.stdout
    tee = _Tee(captured, original)
    sys.stdout = tee
    ok = True
    exc_class = exc_message = None
    try:
        code = compile(source, candidate_path, "exec")
        namespace = {"__name__": "__main__", "__file__": candidate_path}
        exec(code, namespace)
    except SystemExit as exc:
        if exc.code not in (None, 0):
            ok = False
            exc_class = "SystemExit"
            exc_message = str(exc.code)
    except BaseException as exc:
        ok = False
        exc_class = type(exc).__name__
        exc_message = str(exc)
    finally:
        # flush our own tee, not sys.stdout: the candidate may have rebound it
        sys.stdout = original
        tee.flush()

    result = {
        "ok": ok,
        "stdout": captured.getvalue(),
        "duration_ms": _elapsed_ms(started),
    }
    if exc_class is not None:
        result["exception_class"] = exc_class
        result["exception_message"] = exc_message or ""
    return result


def _claim_result_fd() -> int | None:
    """Move descriptor 3 out of the candidate's reach; None when it was absent."""
    try:
        private = os.dup(RESULT_FD)
    except OSError:
        return None
    os.close(RESULT_FD)
    return private


def _emit(result: dict, result_fd: int | None) -> None:
    payload = json.dumps(result, ensure_ascii=False)
    if result_fd is not None:
        try:
            os.write(result_fd, (payload + "\n").encode("utf-8"))
            return
        except OSError:
            pass
    try:
        sys.stdout.write("\n" + SENTINEL + "\n" + payload + "\n")
        sys.stdout.flush()
    except (ValueError, OSError):
        pass


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if os.environ.get("PYTHONHASHSEED") != "0":
        # hash randomization can only be pinned before interpreter start
        env = dict(os.environ, PYTHONHASHSEED="0")
        os.execve(sys.executable, [sys.executable, "-m", "caco_shim", *argv], env)
    result_fd = _claim_result_fd()
    if len(argv) != 1:
        result = {
            "ok": False,
            "stdout": "",
            "exception_class": "ShimSetupError",
            "exception_message": "usage: shim <candidate_path>",
            "duration_ms": 0,
        }
        _emit(result, result_fd)
        return 2
    result = shim_run(argv[0])
    _emit(result, result_fd)
    return 0 if result["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
