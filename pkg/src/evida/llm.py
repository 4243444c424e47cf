"""LLM backends: OpenAI-compatible chat-completions client and offline mocks."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx

from .retrieval import TransportError
from .values import LMH_LABELS, N_DIMS, SUBINDEX_ORDER

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.7
    max_tokens: int = 1024
    top_p: float | None = None
    top_k: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")

    def with_seed(self, seed: int | None) -> "DecodingParams":
        return DecodingParams(self.temperature, self.max_tokens, self.top_p, self.top_k, seed)

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Completion:
    text: str
    first_token_logprobs: Mapping[str, float] | None = None


class MethodUnavailableError(RuntimeError):
    """The backend lacks a capability a method needs (e.g. first-token logprobs)."""


class LLMClient(Protocol):
    supports_logprobs: bool

    def complete(
        self, prompt: str, decoding: DecodingParams, *, logprobs: bool = False
    ) -> Completion: ...


class ChatCompletionsClient:
    """Client for an HTTP ``/chat/completions`` endpoint.

    The API key is read from the environment variable named by ``api_key_env``
    on each request; it never appears in configuration files.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "EVIDA_LLM_API_KEY",
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        top_logprobs: int = 20,
        supports_logprobs: bool = True,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.top_logprobs = top_logprobs
        self.supports_logprobs = supports_logprobs
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _body(self, prompt: str, decoding: DecodingParams, logprobs: bool) -> dict:
        body: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        }
        if decoding.top_p is not None:
            body["top_p"] = decoding.top_p
        if decoding.top_k is not None:
            body["top_k"] = decoding.top_k
        if decoding.seed is not None:
            body["seed"] = decoding.seed
        if logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = self.top_logprobs
        return body

    @staticmethod
    def _parse(payload: dict, logprobs: bool) -> Completion:
        choice = payload["choices"][0]
        text = choice["message"]["content"] or ""
        first = None
        if logprobs:
            content = ((choice.get("logprobs") or {}).get("content")) or []
            if content:
                first = {t["token"]: float(t["logprob"]) for t in content[0].get("top_logprobs", [])}
                first.setdefault(content[0]["token"], float(content[0]["logprob"]))
        return Completion(text, first)

    def complete(self, prompt: str, decoding: DecodingParams, *, logprobs: bool = False) -> Completion:
        if logprobs and not self.supports_logprobs:
            raise MethodUnavailableError(f"{self.model} does not expose logprobs")
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self._body(prompt, decoding, logprobs)
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                return self._parse(resp.json(), logprobs)
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as e:
                last = e
                logger.warning("LLM request failed (attempt %d/%d): %s", attempt + 1, self.retries, e)
        raise TransportError(f"LLM endpoint {self.url} failed after {self.retries} attempts: {last}")


# --- offline backends ------------------------------------------------------

_OPTION_LINE = re.compile(r"^- (\S+?): ", re.MULTILINE)


def _stable_unit(*parts: object) -> float:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def _section(prompt: str, start: str, end: str) -> str:
    i = prompt.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = prompt.find(end, i)
    return prompt[i:] if j < 0 else prompt[i:j]


class HeuristicMockLLM:
    """Stateless offline backend producing well-formed answers for every prompt kind.

    Output is a pure function of (prompt, decoding seed), so runs are
    reproducible and safe under concurrency. Options are read back from the
    ``- <id>: <text>`` lines the prompt renderers emit.
    """

    supports_logprobs = True
    identity = "heuristic-mock-v1"

    def _options(self, prompt: str) -> list[str]:
        block = _section(prompt, "Answer options:\n", "\n\n")
        return _OPTION_LINE.findall(block)

    def _weights(self, prompt: str, options: Sequence[str], seed: object) -> dict[str, float]:
        raw = [0.05 + _stable_unit(prompt, seed, o) for o in options]
        total = math.fsum(raw)
        probs = [round(r / total, 4) for r in raw]
        probs[-1] = round(1.0 - math.fsum(probs[:-1]), 4)
        return dict(zip(options, probs))

    def complete(self, prompt: str, decoding: DecodingParams, *, logprobs: bool = False) -> Completion:
        seed = decoding.seed
        options = self._options(prompt)
        if "assign Welzel sub-index categories" in prompt:
            profiles = []
            for o in options:
                labels = [
                    LMH_LABELS[int(_stable_unit(prompt, seed, o, d) * 3)] for d in range(N_DIMS)
                ]
                profiles.append({"option": o, "subindex_LMH": labels})
            body = {"subindex_order": list(SUBINDEX_ORDER), "option_profiles": profiles, "notes": "mock"}
            return Completion(json.dumps(body))
        if "predicted_distribution" in prompt or "probability distribution" in prompt:
            body = {"predicted_distribution": self._weights(prompt, options, seed), "rationale": "mock"}
            return Completion(json.dumps(body))
        # single-choice answer (sampling / logprob baselines)
        weights = self._weights(prompt, options, None)
        u = _stable_unit(prompt, seed, "sample")
        acc, choice = 0.0, options[-1] if options else "A"
        for o in options:
            acc += weights[o]
            if u < acc:
                choice = o
                break
        first = None
        if logprobs:
            first = {o: math.log(max(w, 1e-12)) for o, w in weights.items()}
        return Completion(choice, first)


@dataclass
class ScriptedRule:
    contains: str
    responses: list[str]
    logprobs: dict[str, float] | None = None


@dataclass
class ScriptedLLM:
    """Replays canned completions chosen by substring match on the prompt.

    Each rule cycles through its responses; prompts matching no rule go to
    ``fallback`` (a ``HeuristicMockLLM`` by default, or an error when None).
    """

    rules: list[ScriptedRule]
    fallback: LLMClient | None = field(default_factory=HeuristicMockLLM)
    supports_logprobs: bool = True
    calls: list[str] = field(default_factory=list, init=False, repr=False)
    _counters: dict[int, itertools.count] = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLLM":
        script = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            ScriptedRule(r["contains"], list(r["responses"]), r.get("logprobs"))
            for r in script.get("rules", [])
        ]
        fallback = HeuristicMockLLM() if script.get("fallback", "heuristic") == "heuristic" else None
        return cls(rules, fallback, script.get("supports_logprobs", True))

    @classmethod
    def always(cls, text: str) -> "ScriptedLLM":
        return cls([ScriptedRule("", [text])], fallback=None)

    def complete(self, prompt: str, decoding: DecodingParams, *, logprobs: bool = False) -> Completion:
        if logprobs and not self.supports_logprobs:
            raise MethodUnavailableError("scripted backend configured without logprobs")
        with self._lock:
            self.calls.append(prompt)
            for idx, rule in enumerate(self.rules):
                if rule.contains in prompt:
                    n = next(self._counters.setdefault(idx, itertools.count()))
                    text = rule.responses[n % len(rule.responses)]
                    return Completion(text, rule.logprobs if logprobs else None)
        if self.fallback is None:
            raise TransportError("no scripted response matches the prompt")
        return self.fallback.complete(prompt, decoding, logprobs=logprobs)
