"""Chat-completion client for the remote extraction and expansion backends.

The wire contract is minimal: a POST with the model name and a single user
message carrying the instruction, the report text, and the allowed answer
list; the first line of the reply is what callers match (after
normalization) against the allowed answers plus "unsure". The endpoint URL,
model name, and timeout come from configuration; the API key is read from
an environment variable and sent as a bearer token.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Callable

import requests

from .errors import ConfigError, ExpanderUnavailableError, ExtractorUnavailableError
from .extraction import ConstrainedQuery
from .template import AnswerOption

log = logging.getLogger(__name__)

API_KEY_ENV = "PROTOREPORT_API_KEY"


@dataclass(frozen=True)
class ChatEndpointConfig:
    url: str
    model: str
    timeout_s: float = 30.0
    api_key_env: str = API_KEY_ENV

    def __post_init__(self):
        if not self.url or not self.model:
            raise ConfigError("remote backend needs both an endpoint url and a model name")


class ChatClient:
    """Thin chat-completion POST wrapper with injectable transport."""

    def __init__(self, config: ChatEndpointConfig,
                 post: Callable[..., requests.Response] | None = None):
        self.config = config
        self._post = post if post is not None else requests.post

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        response = self._post(
            self.config.url, json=payload, headers=headers, timeout=self.config.timeout_s
        )
        response.raise_for_status()
        doc = response.json()
        try:
            return str(doc["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise ValueError(f"unexpected chat response shape: {exc}") from exc


def first_line(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return ""


class RemoteExtractor:
    """Constrained-answer provider backed by a chat endpoint."""

    def __init__(self, client: ChatClient):
        self.client = client

    def answer(self, query: ConstrainedQuery) -> str:
        allowed = ", ".join(f"'{a}'" for a in query.allowed_answers)
        prompt = (
            f"{query.prompt}\n\n"
            f"Report:\n{query.report_excerpt}\n\n"
            f"Allowed answers: {allowed} or 'unsure'. Reply with one of them only."
        )
        try:
            reply = self.client.complete(prompt)
        except Exception as exc:
            raise ExtractorUnavailableError(str(exc)) from exc
        return first_line(reply)


class RemoteExpander:
    """Phrase-expansion provider backed by a chat endpoint."""

    provenance = "llm-expanded"

    def __init__(self, client: ChatClient, max_variants: int = 8):
        self.client = client
        self.max_variants = max_variants

    def propose(self, option: AnswerOption) -> list[str]:
        prompt = (
            f"List up to {self.max_variants} synonyms, abbreviations, or alternative "
            f"phrasings for the report finding '{option.canonical_text}'. "
            "One phrase per line, no numbering, no commentary."
        )
        try:
            reply = self.client.complete(prompt)
        except Exception as exc:
            raise ExpanderUnavailableError(str(exc)) from exc
        variants = [line.strip() for line in reply.splitlines() if line.strip()]
        return variants[: self.max_variants]
