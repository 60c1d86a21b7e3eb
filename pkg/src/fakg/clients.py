"""HTTP clients for remote verifiers and generators.

Two wire styles are supported. :class:`HttpVerifier` speaks the dedicated
``POST /verify`` contract. :class:`ChatCompletionClient` speaks the
OpenAI-compatible ``/chat/completions`` contract and backs the chat adapters
(:class:`ChatVerifier` and the synthesis generators).
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx

from .graph import FaceAttackGraph, Subgraph
from .grounding import Candidate, VerifierError
from .synthesis import Caption, ClientError, Skeleton

log = logging.getLogger(__name__)

__all__ = [
    "EndpointConfig",
    "HttpVerifier",
    "ChatCompletionClient",
    "ChatVerifier",
    "ChatSkeletonGenerator",
    "ChatCaptioner",
    "ChatFuser",
    "ChatJudge",
]


@dataclass(frozen=True)
class EndpointConfig:
    """Connection settings for one remote service.

    ``from_env`` reads ``<PREFIX>_ENDPOINT``, ``<PREFIX>_API_KEY``,
    ``<PREFIX>_MODEL`` and ``<PREFIX>_TIMEOUT_MS``; explicit keyword
    overrides win over the environment.
    """

    endpoint: str
    api_key: str | None = None
    model: str | None = None
    timeout: float = 30.0
    max_in_flight: int = 4
    retries: int = 2
    backoff: float = 0.5

    def __repr__(self) -> str:
        key = "***" if self.api_key else None
        return (
            f"EndpointConfig(endpoint={self.endpoint!r}, api_key={key!r}, model={self.model!r}, "
            f"timeout={self.timeout}, max_in_flight={self.max_in_flight}, retries={self.retries})"
        )

    @classmethod
    def from_env(cls, prefix: str = "VERIFIER", env: Mapping[str, str] | None = None, **overrides) -> "EndpointConfig":
        env = os.environ if env is None else env
        values: dict[str, Any] = {
            "endpoint": env.get(f"{prefix}_ENDPOINT"),
            "api_key": env.get(f"{prefix}_API_KEY"),
            "model": env.get(f"{prefix}_MODEL"),
        }
        if env.get(f"{prefix}_TIMEOUT_MS"):
            values["timeout"] = float(env[f"{prefix}_TIMEOUT_MS"]) / 1000.0
        values.update({k: v for k, v in overrides.items() if v is not None})
        if not values.get("endpoint"):
            raise ValueError(f"no endpoint configured ({prefix}_ENDPOINT)")
        return cls(**{k: v for k, v in values.items() if v is not None})


class _Transport:
    """Shared POST-with-retries plumbing with a cap on concurrent requests."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._client = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(max(1, cfg.max_in_flight))

    def post_json(self, url: str, payload: Mapping[str, Any]) -> Any:
        last: Exception | None = None
        for attempt in range(self.cfg.retries + 1):
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload)
                if resp.status_code == 200:
                    return resp.json()
                last = RuntimeError(f"HTTP {resp.status_code}: {resp.text[:300]}")
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    break
            except (httpx.HTTPError, json.JSONDecodeError) as exc:
                last = exc
            if attempt < self.cfg.retries:
                delay = self.cfg.backoff * (2**attempt)
                log.debug("POST %s failed (%s); retrying in %.2fs", url, last, delay)
                time.sleep(delay)
        raise ConnectionError(f"POST {url} failed after {self.cfg.retries + 1} attempt(s): {last}")

    def close(self) -> None:
        self._client.close()


class HttpVerifier:
    """Verifier behind ``POST {endpoint}/verify``.

    Request ``{"think", "candidates": [...]}``; response ``{"matches": [bool, ...]}``
    of the same length. Anything else is a :class:`VerifierError`.
    """

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self._http = _Transport(cfg, transport)
        self.url = cfg.endpoint.rstrip("/") + "/verify"

    def verify(self, think: str, candidates: Sequence[Candidate]) -> list[bool]:
        payload = {"think": think, "candidates": [c.to_dict() for c in candidates]}
        try:
            body = self._http.post_json(self.url, payload)
        except ConnectionError as exc:
            raise VerifierError(str(exc), candidates) from exc
        matches = body.get("matches") if isinstance(body, dict) else None
        if not isinstance(matches, list) or len(matches) != len(candidates):
            raise VerifierError("verifier response has missing or mis-sized 'matches'", candidates)
        if not all(isinstance(m, bool) for m in matches):
            raise VerifierError("verifier 'matches' must be booleans", candidates)
        return matches


class ChatCompletionClient:
    """Minimal OpenAI-compatible chat-completion client."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None):
        if not cfg.model:
            raise ValueError("chat-completion client needs a model name")
        self.cfg = cfg
        self._http = _Transport(cfg, transport)
        self.url = cfg.endpoint.rstrip("/") + "/chat/completions"

    def complete(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = 1024) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        body = self._http.post_json(self.url, payload)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ConnectionError(f"malformed chat-completion response: {str(body)[:300]}") from None


_VERIFY_SYSTEM = (
    "You check whether a forensic rationale about a face image mentions given "
    "knowledge-graph relations, explicitly or by paraphrase. Answer each numbered "
    "question with its number followed by yes or no, one per line."
)
_ANSWER_LINE = re.compile(r"^\s*\(?(\d+)[).:\-\s]+\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)


class ChatVerifier:
    """Verifier that poses one yes/no question per candidate in a single chat request."""

    def __init__(self, chat: ChatCompletionClient):
        self.chat = chat

    @staticmethod
    def build_messages(think: str, candidates: Sequence[Candidate]) -> list[dict]:
        questions = "\n".join(
            f"{i}. Does the rationale state that {c.attack_name} {c.predicate} {c.feature_name}?"
            for i, c in enumerate(candidates, 1)
        )
        user = f"Rationale:\n{think}\n\nQuestions:\n{questions}"
        return [{"role": "system", "content": _VERIFY_SYSTEM}, {"role": "user", "content": user}]

    @staticmethod
    def parse_reply(reply: str, n: int) -> list[bool]:
        answers: dict[int, bool] = {}
        for m in _ANSWER_LINE.finditer(reply):
            answers.setdefault(int(m.group(1)), m.group(2).lower() == "yes")
        if set(answers) != set(range(1, n + 1)):
            raise ValueError(f"reply answers {sorted(answers)} do not cover questions 1..{n}")
        return [answers[i] for i in range(1, n + 1)]

    def verify(self, think: str, candidates: Sequence[Candidate]) -> list[bool]:
        if not candidates:
            return []
        try:
            reply = self.chat.complete(self.build_messages(think, candidates))
            return self.parse_reply(reply, len(candidates))
        except (ConnectionError, ValueError) as exc:
            raise VerifierError(str(exc), candidates) from exc


# -- synthesis generators ------------------------------------------------------------


def _json_reply(chat: ChatCompletionClient, messages: list[dict]) -> Any:
    try:
        reply = chat.complete(messages)
    except ConnectionError as exc:
        raise ClientError(str(exc)) from exc
    m = re.search(r"\{.*\}", reply, re.DOTALL)
    if m is None:
        raise ClientError(f"no JSON object in reply: {reply[:200]}")
    try:
        return json.loads(m.group(0))
    except json.JSONDecodeError as exc:
        raise ClientError(f"unparseable JSON in reply: {exc}") from None


def _image_content(image_ref: str, inline: bool) -> dict:
    if inline:
        path = Path(image_ref)
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        data = base64.b64encode(path.read_bytes()).decode("ascii")
        url = f"data:{mime};base64,{data}"
    else:
        url = image_ref
    return {"type": "image_url", "image_url": {"url": url}}


class ChatSkeletonGenerator:
    """Asks a chat model for a JSON skeleton over the serialised subgraph."""

    def __init__(self, chat: ChatCompletionClient, g: FaceAttackGraph):
        self.chat = chat
        self.g = g

    def generate(self, subgraph: Subgraph) -> Skeleton:
        ents = self.g.entities
        triples = [[ents[r.attack].name, r.predicate, ents[r.feature].name] for r in subgraph.edges]
        prompt = (
            f"Center attack: {ents[subgraph.center].name}\nRelations (attack, relation, feature):\n"
            + json.dumps(triples, ensure_ascii=False)
            + '\nWrite a reasoning question about the center attack. Reply with JSON '
            '{"question": str, "reasoning_steps": [str], "cited_triples": [[attack, relation, feature]]} '
            "citing only the relations above."
        )
        doc = _json_reply(self.chat, [{"role": "user", "content": prompt}])
        try:
            return Skeleton.from_dict(doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise ClientError(f"bad skeleton JSON: {exc}") from None


class ChatCaptioner:
    def __init__(self, chat: ChatCompletionClient, inline_images: bool = False):
        self.chat = chat
        self.inline_images = inline_images

    def caption(self, image_ref: str, label: str) -> Caption:
        content = [
            _image_content(image_ref, self.inline_images),
            {
                "type": "text",
                "text": f"This face image is labelled {label}. Describe the visible evidence "
                "(illumination, texture consistency, boundary artifacts) relevant to that label. "
                'Reply with JSON {"caption": str}.',
            },
        ]
        doc = _json_reply(self.chat, [{"role": "user", "content": content}])
        text = str(doc.get("caption", "")).strip()
        if not text:
            raise ClientError("empty caption")
        return Caption(text)


class ChatFuser:
    def __init__(self, chat: ChatCompletionClient, inline_images: bool = False):
        self.chat = chat
        self.inline_images = inline_images

    def fuse(self, image_ref: str, skeleton: Skeleton, caption: Caption) -> tuple[str, str, str | None]:
        content = [
            _image_content(image_ref, self.inline_images),
            {
                "type": "text",
                "text": "Combine the reasoning skeleton and the image description into one question "
                "and answer about this face image.\nSkeleton: "
                + json.dumps(skeleton.to_dict(), ensure_ascii=False)
                + f"\nDescription: {caption.text}\n"
                'Reply with JSON {"question": str, "rationale": str, "answer": str}.',
            },
        ]
        doc = _json_reply(self.chat, [{"role": "user", "content": content}])
        q, a = str(doc.get("question", "")).strip(), str(doc.get("answer", "")).strip()
        if not q or not a:
            raise ClientError("fusion reply lacks question or answer")
        rationale = doc.get("rationale")
        return q, a, (str(rationale).strip() or None) if rationale is not None else None


_RUBRICS = {
    "fact_conflict": (
        "You are a critic. Decide whether the image description contradicts the attack logic in the "
        'reasoning skeleton. Reply with JSON {"conflict": bool, "reason": str}.'
    ),
    "pruning": (
        "Score the QA sample on logical complexity (multi-hop reasoning, dense diagnostic evidence) "
        'and information gain (diagnostic value), each in [0, 1]. Reply with JSON {"complexity": float, "info": float}.'
    ),
}


class ChatJudge:
    def __init__(self, chat: ChatCompletionClient):
        self.chat = chat

    def judge(self, payload: Mapping[str, Any], rubric: str) -> dict:
        if rubric not in _RUBRICS:
            raise ValueError(f"unknown rubric {rubric!r}")
        body = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in payload.items()}
        messages = [
            {"role": "system", "content": _RUBRICS[rubric]},
            {"role": "user", "content": json.dumps(body, ensure_ascii=False)},
        ]
        doc = _json_reply(self.chat, messages)
        if rubric == "fact_conflict":
            if not isinstance(doc.get("conflict"), bool):
                raise ClientError("judge reply lacks boolean 'conflict'")
            return {"conflict": doc["conflict"], "reason": str(doc.get("reason", ""))}
        try:
            return {"complexity": float(doc["complexity"]), "info": float(doc["info"])}
        except (KeyError, TypeError, ValueError):
            raise ClientError("judge reply lacks numeric 'complexity'/'info'") from None
