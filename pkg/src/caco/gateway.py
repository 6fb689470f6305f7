"""Prompt rendering and chat-completion access for every pipeline role."""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import requests

from .model import SamplingParams

ASSISTANT_SYSTEM = "You are a helpful assistant."
DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF_S = 0.5
DEFAULT_MAX_IN_FLIGHT = 8

_PLACEHOLDER_RE = re.compile(r"\{(problem|solution|code|test_code|question)\}")


class GatewayError(Exception):
    pass


class TransientBackendError(GatewayError):
    """Retryable transport failure (connection, 429, 5xx)."""


class BackendUnavailable(GatewayError):
    """Raised after the retry budget is exhausted or on non-retryable backend faults."""


class MissingPlaceholder(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"binding missing for placeholder {key!r}")
        self.key = key


class UnparseableVerdict(GatewayError):
    pass


class MockScriptMiss(GatewayError):
    """The scripted backend has no entry for this request."""


class Role(str, Enum):
    UNIFIER_MATH = "unifier-math"
    UNIFIER_ALGO = "unifier-algo"
    CODEGEN = "codegen"
    REVERSER = "reverser"
    SOLVER = "solver"
    JUDGE_CONSISTENCY = "judge-consistency"
    JUDGE_SOLVABLE = "judge-solvable"
    JUDGE_CORRECT = "judge-correct"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    system: str | None
    required: frozenset[str]
    sha256: str


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False
    attempts: int = 1


# Asset file, system message, and placeholders the caller must bind, per role.
_ROLE_SPECS: dict[Role, tuple[str, str | None, frozenset[str]]] = {
    Role.UNIFIER_MATH: ("math-to-code.txt", None, frozenset({"problem"})),
    Role.UNIFIER_ALGO: ("code-refactor.txt", None, frozenset({"code"})),
    Role.CODEGEN: ("codegen-sample.txt", ASSISTANT_SYSTEM, frozenset()),
    Role.REVERSER: ("problem-from-code.txt", None, frozenset({"code"})),
    Role.SOLVER: ("boxed-solution.txt", None, frozenset({"problem"})),
    Role.JUDGE_CONSISTENCY: ("judge-consistency.txt", None, frozenset({"solution", "code"})),
    Role.JUDGE_SOLVABLE: ("judge-solvable.txt", None, frozenset({"problem"})),
    Role.JUDGE_CORRECT: ("judge-correct.txt", None, frozenset({"problem", "solution"})),
}

# Shipped but not bound to a role; kept for exporting training text.
_EXTRA_ASSETS = ("codegen-train.txt", "training-pair.txt")

DEFAULT_PARAMS: dict[Role, SamplingParams] = {
    Role.UNIFIER_MATH: SamplingParams(temperature=0.6, top_p=1.0, max_tokens=2048),
    Role.UNIFIER_ALGO: SamplingParams(temperature=0.6, top_p=1.0, max_tokens=2048),
    Role.CODEGEN: SamplingParams(temperature=0.9, top_p=1.0, top_k=0, min_p=0.0, max_tokens=1024),
    Role.REVERSER: SamplingParams(temperature=0.7, top_p=0.8, top_k=20, min_p=0.0, max_tokens=2048),
    Role.SOLVER: SamplingParams(temperature=0.7, top_p=0.8, top_k=20, min_p=0.0, max_tokens=2048),
    Role.JUDGE_CONSISTENCY: SamplingParams(temperature=0.0, top_p=1.0, max_tokens=16),
    Role.JUDGE_SOLVABLE: SamplingParams(temperature=0.0, top_p=1.0, max_tokens=16),
    Role.JUDGE_CORRECT: SamplingParams(temperature=0.0, top_p=1.0, max_tokens=16),
}


def default_params(role: Role) -> SamplingParams:
    return DEFAULT_PARAMS[Role(role)]


def _read_asset(name: str, prompt_dir: str | None) -> str:
    if prompt_dir:
        return Path(prompt_dir, name).read_text(encoding="utf-8")
    return resources.files("caco").joinpath("prompts", name).read_text(encoding="utf-8")


def _read_manifest(prompt_dir: str | None) -> dict[str, str] | None:
    try:
        raw = _read_asset("checksums.json", prompt_dir)
    except (FileNotFoundError, OSError):
        return None
    return json.loads(raw)


class PromptLibrary:
    """Loads template assets once, verifying them against the checksum manifest."""

    def __init__(self, prompt_dir: str | None = None):
        manifest = _read_manifest(prompt_dir)
        self.templates: dict[Role, PromptTemplate] = {}
        self.extra: dict[str, PromptTemplate] = {}
        for role, (asset, system, required) in _ROLE_SPECS.items():
            self.templates[role] = self._load(asset, system, required, manifest, prompt_dir)
        for asset in _EXTRA_ASSETS:
            placeholders = None
            self.extra[asset] = self._load(asset, None, placeholders, manifest, prompt_dir)

    @staticmethod
    def _load(asset, system, required, manifest, prompt_dir) -> PromptTemplate:
        body = _read_asset(asset, prompt_dir)
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        if manifest is not None and asset in manifest and manifest[asset] != digest:
            raise GatewayError(f"prompt asset {asset} does not match its checksum")
        if required is None:
            required = frozenset(m.group(1) for m in _PLACEHOLDER_RE.finditer(body))
        return PromptTemplate(
            name=asset, body=body, system=system, required=frozenset(required), sha256=digest
        )

    def render(self, role: Role, bindings: dict[str, str]) -> tuple[dict, ...]:
        """Ordered chat messages for a role; every required placeholder must be bound."""
        template = self.templates[Role(role)]
        for key in sorted(template.required):
            if key not in bindings:
                raise MissingPlaceholder(key)

        def _sub(match: re.Match) -> str:
            key = match.group(1)
            if key in bindings:
                return str(bindings[key])
            if key in template.required:
                raise MissingPlaceholder(key)
            return ""

        body = _PLACEHOLDER_RE.sub(_sub, template.body)
        messages: list[dict] = []
        if template.system is not None:
            messages.append({"role": "system", "content": template.system})
        messages.append({"role": "user", "content": body.rstrip("\n") if template.system else body})
        return tuple(messages)


def binding_digest(role: Role, bindings: dict[str, str]) -> str:
    payload = json.dumps(
        {"role": Role(role).value, "bindings": {k: str(v) for k, v in sorted(bindings.items())}},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class HttpBackend:
    """Chat-completions endpoint speaking the common JSON schema."""

    def __init__(
        self,
        endpoint: str,
        models: dict[str, str] | str,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.models = models
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def _model_for(self, role: Role) -> str:
        if isinstance(self.models, str):
            return self.models
        model = self.models.get(Role(role).value) or self.models.get("default")
        if not model:
            raise BackendUnavailable(f"no model configured for role {Role(role).value}")
        return model

    def complete(
        self,
        role: Role,
        messages: tuple[dict, ...],
        params: SamplingParams,
        key: str | None = None,
        ordinal: int | None = None,
    ) -> Completion:
        body = {
            "model": self._model_for(role),
            "messages": list(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        if params.top_k:
            body["top_k"] = params.top_k
        if params.min_p:
            body["min_p"] = params.min_p
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self.session.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"backend status {response.status_code}")
        if response.status_code != 200:
            raise BackendUnavailable(
                f"backend status {response.status_code}: {response.text[:200]}"
            )
        try:
            payload = response.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError) as exc:
            raise BackendUnavailable(f"malformed backend reply: {exc}") from exc
        truncated = choice.get("finish_reason") == "length"
        return Completion(text=text, truncated=truncated)


class MockBackend:
    """Deterministic scripted backend for offline runs.

    Per-role script entries resolve in order: exact key (binding digest or label),
    substring rules over the rendered text, an ordinal-indexed queue, then a default.
    """

    def __init__(self, script: dict):
        roles = script.get("roles")
        if roles is None:
            roles = {k: v for k, v in script.items() if k != "delay_s"}
        self.delay_s = float(script.get("delay_s", 0.0))
        self.script = {str(k): v for k, v in roles.items()}
        self._lock = threading.Lock()
        self._queue_pos: dict[str, int] = {}
        self.calls: dict[str, list[str]] = {}
        self._in_flight = 0
        self.max_in_flight_seen = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        import yaml

        with open(path, "r", encoding="utf-8") as handle:
            return cls(yaml.safe_load(handle) or {})

    @staticmethod
    def _entry_completion(entry) -> Completion:
        if isinstance(entry, dict):
            return Completion(
                text=str(entry.get("text", "")), truncated=bool(entry.get("truncated", False))
            )
        return Completion(text=str(entry))

    def complete(
        self,
        role: Role,
        messages: tuple[dict, ...],
        params: SamplingParams,
        key: str | None = None,
        ordinal: int | None = None,
    ) -> Completion:
        role_name = Role(role).value
        rendered = "\n".join(str(m.get("content", "")) for m in messages)
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)
            self.calls.setdefault(role_name, []).append(rendered)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            spec = self.script.get(role_name)
            if spec is None:
                raise MockScriptMiss(f"no script for role {role_name}")
            if isinstance(spec, list):
                spec = {"queue": spec}
            if isinstance(spec, str):
                return self._entry_completion(spec)
            keyed = spec.get("keyed") or {}
            if key is not None and key in keyed:
                return self._entry_completion(keyed[key])
            for rule in spec.get("rules") or ():
                if str(rule.get("contains", "")) in rendered:
                    reply = rule.get("reply", rule)
                    return self._entry_completion(reply)
            queue = spec.get("queue")
            if queue:
                if ordinal is not None:
                    if ordinal < len(queue):
                        return self._entry_completion(queue[ordinal])
                else:
                    with self._lock:
                        pos = self._queue_pos.get(role_name, 0)
                        self._queue_pos[role_name] = pos + 1
                    if pos < len(queue):
                        return self._entry_completion(queue[pos])
            if "default" in spec:
                return self._entry_completion(spec["default"])
            raise MockScriptMiss(f"script for role {role_name} has no entry for this request")
        finally:
            with self._lock:
                self._in_flight -= 1


class Gateway:
    """Renders prompts and completes them with retries and a global in-flight bound."""

    def __init__(
        self,
        backend,
        prompts: PromptLibrary | None = None,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_s: float = DEFAULT_BACKOFF_S,
    ):
        if max_in_flight < 1 or max_attempts < 1:
            raise ValueError("max_in_flight and max_attempts must be positive")
        self.backend = backend
        self.prompts = prompts or PromptLibrary()
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def render(self, role: Role, bindings: dict[str, str]) -> tuple[dict, ...]:
        return self.prompts.render(role, bindings)

    def complete(
        self,
        role: Role,
        messages: tuple[dict, ...],
        params: SamplingParams | None = None,
        key: str | None = None,
        ordinal: int | None = None,
    ) -> Completion:
        params = params or default_params(role)
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            with self._slots:
                try:
                    done = self.backend.complete(
                        role, messages, params, key=key, ordinal=ordinal
                    )
                    return Completion(done.text, done.truncated, attempts=attempt)
                except TransientBackendError as exc:
                    last = exc
            if attempt < self.max_attempts:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
        raise BackendUnavailable(f"backend failed after {self.max_attempts} attempts: {last}")

    def generate(
        self,
        role: Role,
        bindings: dict[str, str],
        params: SamplingParams | None = None,
        ordinal: int | None = None,
    ) -> Completion:
        messages = self.render(role, bindings)
        return self.complete(
            role, messages, params, key=binding_digest(role, bindings), ordinal=ordinal
        )

    def judge(self, role: Role, bindings: dict[str, str]) -> bool:
        """Ask a yes/no question; parse the first alphabetic token, case-insensitively."""
        reply = self.generate(role, bindings, params=default_params(role))
        token = re.search(r"[A-Za-z]+", reply.text)
        if token:
            word = token.group().lower()
            if word == "yes":
                return True
            if word == "no":
                return False
        raise UnparseableVerdict(f"verdict not parseable: {reply.text[:80]!r}")
