import json
import logging
import re
import threading
from collections import deque
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Protocol

from .http_api import TRANSPORT_ERRORS, JsonApi
from .ir import MalformedJson
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

FENCED_JSON_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


class LlmFailure(ComfyFlowError):
    pass


class NoJsonFound(ComfyFlowError):
    def __init__(self) -> None:
        super().__init__("reply contains no JSON")


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class RemoteLlmClient:
    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str = "",
        temperature: float = 0.95,
        top_p: float = 0.7,
        max_tokens: int = 8192,
        timeout: float = 120,
        retries: int = 1,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.api = JsonApi(endpoint, headers=headers, timeout=timeout, retries=retries)
        self.model = model
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "RemoteLlmClient":
        if not config.get("LLM_ENDPOINT"):
            raise LlmFailure("LLM_ENDPOINT is not configured")
        return cls(
            config["LLM_ENDPOINT"],
            config["LLM_MODEL"],
            api_key=config.get("LLM_API_KEY", ""),
            temperature=config["LLM_TEMPERATURE"],
            top_p=config["LLM_TOP_P"],
            max_tokens=config["LLM_MAX_TOKENS"],
            timeout=config["LLM_TIMEOUT"],
            retries=config["LLM_RETRIES"],
        )

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        try:
            reply = self.api.post_json("", payload)
        except TRANSPORT_ERRORS as e:
            raise LlmFailure(str(e)) from e

        if isinstance(reply, dict):
            if isinstance(reply.get("text"), str):
                return reply["text"]
            choices = reply.get("choices")
            if isinstance(choices, list) and choices and isinstance(choices[0], dict):
                text = choices[0].get("text")
                if isinstance(text, str):
                    return text
        raise LlmFailure(f"unexpected completion payload: {str(reply)[:200]}")


class ScriptedLlmClient:
    """Deterministic client for tests and offline runs.

    A prompt is answered from `table` when present, otherwise by `responder`,
    otherwise from the `replies` queue, otherwise with `default`.
    """

    def __init__(
        self,
        table: Optional[Dict[str, str]] = None,
        replies: Optional[Iterable[str]] = None,
        default: Optional[str] = None,
        responder: Optional[Callable[[str], Optional[str]]] = None,
    ) -> None:
        self.table = dict(table or {})
        self.replies = deque(replies or ())
        self.default = default
        self.responder = responder
        self.prompts: List[str] = []
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.prompts.append(prompt)
            if prompt in self.table:
                return self.table[prompt]
            if self.responder is not None:
                reply = self.responder(prompt)
                if reply is not None:
                    return reply
            if self.replies:
                return self.replies.popleft()
            if self.default is not None:
                return self.default
        raise LlmFailure("scripted client has no reply for this prompt")


def extract_json(text: str) -> Any:
    """Return the first fenced JSON block, else the whole text, else the first embedded value."""
    match = FENCED_JSON_RE.search(text)
    if match:
        try:
            return json.loads(match.group(1))
        except json.JSONDecodeError as e:
            raise MalformedJson(f"fenced block is not JSON: {e}") from e

    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass

    decoder = json.JSONDecoder()
    for i, char in enumerate(text):
        if char in "[{":
            try:
                value, _ = decoder.raw_decode(text, i)
                return value
            except json.JSONDecodeError:
                continue
    raise NoJsonFound()
