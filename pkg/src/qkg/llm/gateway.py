"""Role-addressed chat-completion gateway with retries, admission control and a run log."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import yaml

logger = logging.getLogger(__name__)

ROLE_NAMES = ("reasoner", "validator", "annotator", "patient-context-llm")

Messages = Sequence[Mapping[str, str]]


class GatewayError(RuntimeError):
    """All attempts failed; ``last_error`` holds the final failure."""

    def __init__(self, message: str, last_error: BaseException | None = None):
        super().__init__(message)
        self.last_error = last_error


class TransientError(RuntimeError):
    """Retryable failure (transport error or 5xx)."""


class ScriptMiss(KeyError):
    pass


@dataclass(frozen=True)
class RoleConfig:
    role: str
    model: str = ""
    endpoint: str = ""
    api_key_env: str | None = None
    timeout: float = 120.0
    max_retries: int = 2
    max_parallel: int = 4
    temperature: float = 0.0
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    extra_headers: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError(f"{self.role}: max_retries must be >= 0")
        if self.max_parallel < 1:
            raise ValueError(f"{self.role}: max_parallel must be >= 1")

    @classmethod
    def from_dict(cls, role: str, d: Mapping) -> "RoleConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "role"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"role {role!r}: unknown keys {sorted(unknown)}")
        return cls(role=role, **dict(d))


@dataclass
class ChatExchange:
    role: str
    messages: list[dict]
    response: str | None
    fingerprint: str
    model: str = ""
    attempts: int = 1
    latency_s: float = 0.0
    error: str | None = None
    usage: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


def fingerprint(role: str, messages: Messages) -> str:
    """Stable hash of the role and the concatenated message texts."""
    h = hashlib.sha256()
    h.update(role.encode("utf-8"))
    for m in messages:
        h.update(b"\x1e")
        h.update(str(m["content"]).encode("utf-8"))
    return h.hexdigest()[:32]


class Backend(Protocol):
    def send(self, config: RoleConfig, messages: Messages) -> tuple[str, dict]:
        """Return (response text, usage dict)."""


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client."""

    def __init__(self, client: httpx.Client | None = None):
        self._client = client or httpx.Client()

    def send(self, config: RoleConfig, messages: Messages) -> tuple[str, dict]:
        headers = {"Content-Type": "application/json", **config.extra_headers}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if key is None:
                raise GatewayError(f"environment variable {config.api_key_env} is not set")
            headers[config.auth_header] = f"{config.auth_scheme} {key}".strip()
        payload = {"model": config.model, "messages": [dict(m) for m in messages],
                   "temperature": config.temperature}
        url = config.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        try:
            resp = self._client.post(url, json=payload, headers=headers, timeout=config.timeout)
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"malformed completion body: {exc}") from exc
        return text or "", dict(body.get("usage") or {})


class MockBackend:
    """Deterministic backend answering from a fingerprint -> text script.

    On a miss: ``on_miss="error"`` raises, ``"default"`` returns
    ``default_text``, and a ``responder`` callable (role, messages) -> text,
    when given, takes precedence over both.
    """

    def __init__(self, script: Mapping[str, str] | None = None, *, on_miss: str = "error",
                 default_text: str = "", responder: Callable[[str, Messages], str] | None = None):
        if on_miss not in ("error", "default"):
            raise ValueError("on_miss must be 'error' or 'default'")
        self.script = dict(script or {})
        self.on_miss = on_miss
        self.default_text = default_text
        self.responder = responder

    def send(self, config: RoleConfig, messages: Messages) -> tuple[str, dict]:
        fp = fingerprint(config.role, messages)
        if fp in self.script:
            return self.script[fp], {}
        if self.responder is not None:
            return self.responder(config.role, messages), {}
        if self.on_miss == "default":
            return self.default_text, {}
        raise ScriptMiss(f"no scripted response for role {config.role!r} fingerprint {fp}")

    @classmethod
    def from_run_log(cls, path, **kwargs) -> "MockBackend":
        script = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    ex = json.loads(line)
                    if ex.get("response") is not None:
                        script[ex["fingerprint"]] = ex["response"]
        return cls(script, **kwargs)

    @classmethod
    def from_file(cls, path, **kwargs) -> "MockBackend":
        """Load a JSON ``{fingerprint: text}`` map or a JSONL run log."""
        path = Path(path)
        if path.suffix == ".jsonl":
            return cls.from_run_log(path, **kwargs)
        return cls(json.loads(path.read_text(encoding="utf-8")), **kwargs)


class Gateway:
    def __init__(self, roles: Mapping[str, RoleConfig], backend: Backend, *,
                 run_log: str | os.PathLike | None = None, backoff_base: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.roles = dict(roles)
        self.backend = backend
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._gates = {name: threading.BoundedSemaphore(cfg.max_parallel)
                       for name, cfg in self.roles.items()}
        self._log_lock = threading.Lock()
        self._log_path = Path(run_log) if run_log else None
        self.exchanges: list[ChatExchange] = []

    def has_role(self, role: str | None) -> bool:
        return role is not None and role in self.roles

    def complete(self, role: str, messages: Messages) -> str:
        try:
            cfg = self.roles[role]
        except KeyError:
            raise GatewayError(f"role {role!r} is not configured") from None
        msgs = [{"role": m["role"], "content": m["content"]} for m in messages]
        fp = fingerprint(role, msgs)
        last: BaseException | None = None
        attempts = 0
        with self._gates[role]:
            for attempt in range(cfg.max_retries + 1):
                attempts = attempt + 1
                t0 = time.perf_counter()
                try:
                    text, usage = self.backend.send(cfg, msgs)
                except (TransientError, ScriptMiss, GatewayError) as exc:
                    last = exc
                    # every failed attempt is logged on its own line
                    self._record(ChatExchange(role, msgs, None, fp, cfg.model, attempts,
                                              time.perf_counter() - t0, str(exc)))
                    if not isinstance(exc, TransientError):
                        break
                    if attempt < cfg.max_retries:
                        self._sleep(self.backoff_base * 2 ** attempt)
                    continue
                self._record(ChatExchange(role, msgs, text, fp, cfg.model, attempts,
                                          time.perf_counter() - t0, None, usage))
                return text
        raise GatewayError(f"{role}: failed after {attempts} attempt(s): {last}", last)

    def _record(self, ex: ChatExchange):
        with self._log_lock:
            self.exchanges.append(ex)
            if self._log_path is not None:
                with open(self._log_path, "a", encoding="utf-8") as fh:
                    fh.write(ex.to_json() + "\n")


def load_role_configs(raw: Mapping) -> dict[str, RoleConfig]:
    return {name: RoleConfig.from_dict(name, block or {}) for name, block in raw.items()}


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def build_gateway(config: Mapping, *, run_log=None, base_dir: Path | None = None) -> Gateway:
    """Gateway from a parsed config mapping (``roles`` + optional ``backend``)."""
    roles = load_role_configs(config.get("roles") or {})
    backend_cfg = config.get("backend") or {"type": "http"}
    kind = backend_cfg.get("type", "http")
    if kind == "http":
        backend: Backend = HttpBackend()
    elif kind == "mock":
        script = backend_cfg.get("script")
        kwargs = {"on_miss": backend_cfg.get("on_miss", "error"),
                  "default_text": backend_cfg.get("default_text", "")}
        if script:
            p = Path(script)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            backend = MockBackend.from_file(p, **kwargs)
        else:
            backend = MockBackend(**kwargs)
    else:
        raise ValueError(f"unknown backend type {kind!r}")
    return Gateway(roles, backend, run_log=run_log,
                   backoff_base=float(backend_cfg.get("backoff_base", 0.5)))
