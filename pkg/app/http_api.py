import logging
import threading
import time
from http import HTTPMethod, HTTPStatus
from typing import Any, Dict, Optional

import requests

from .util import ComfyFlowError

logger = logging.getLogger(__name__)


class ApiFailureNoResponse(ComfyFlowError):
    pass


class ApiFailureBadResponse(ComfyFlowError):
    pass


TRANSPORT_ERRORS = (ApiFailureNoResponse, ApiFailureBadResponse)


class JsonApi:
    """JSON-over-HTTP client with per-thread sessions, back-off and retries.

    Server errors (5xx, 429) and connection failures are retried; any other
    response is handed back to the caller to interpret.
    """

    SENSITIVE_HEADERS = {"authorization", "apikey", "api-key", "x-api-key"}

    def __init__(
        self,
        base_url: str,
        headers: Optional[Dict[str, str]] = None,
        rate_limit: Optional[float] = None,
        timeout: float = 30,
        retries: int = 1,
        backoff_factor: float = 1,
    ) -> None:
        self.base_url = base_url
        self.headers = headers or {}
        self.rate_limit = rate_limit
        self.timeout = timeout
        self.retries = retries
        self.backoff_factor = backoff_factor

        self.api_lock = threading.Lock()
        self._thread_local = threading.local()
        self.last_request_time = float(0)

    def _get_session(self) -> requests.Session:
        if not hasattr(self._thread_local, "session"):
            session = requests.Session()
            session.headers.update(self.headers)
            self._thread_local.session = session
        return self._thread_local.session

    def _format_headers(self, headers: Dict[str, str]) -> str:
        safe_headers = {}
        for key, value in headers.items():
            if key.lower() in self.SENSITIVE_HEADERS:
                safe_headers[key] = "#" * len(value)
            else:
                safe_headers[key] = value
        return str(safe_headers)

    def url(self, path: str = "") -> str:
        if not path:
            return self.base_url
        return f"{self.base_url.rstrip('/')}/{path.lstrip('/')}"

    def request(
        self, method: HTTPMethod, path: str = "", payload: Optional[Any] = None
    ) -> requests.Response:
        session = self._get_session()
        url = self.url(path)
        for attempt in range(1 + self.retries):
            self._rate_limit()
            retry_after = None
            try:
                requestp = session.prepare_request(requests.Request(method, url, json=payload))
                logger.info(
                    f"{id(self)} Request "
                    f"{f'(retries={attempt} of {self.retries}): ' if attempt > 0 else ''}"
                    f"{method} url={requestp.url} timeout={self.timeout}"
                )
                response = session.send(requestp, timeout=self.timeout)
                if (
                    response.status_code < HTTPStatus.INTERNAL_SERVER_ERROR
                    and response.status_code != HTTPStatus.TOO_MANY_REQUESTS
                ):
                    return response

                logger.error(
                    f"{id(self)} Bad Response "
                    f"{f'(retries={attempt} of {self.retries}): ' if attempt > 0 else ''}"
                    f"{requestp.url} status_code={response.status_code} ({response.reason}) "
                    f"headers={self._format_headers(dict(response.headers))} "
                    f"content={response.content.decode(errors='replace')}"
                )
                if response.status_code == HTTPStatus.TOO_MANY_REQUESTS:
                    if str(response.headers.get("retry-after", "")).isdigit():
                        retry_after = int(response.headers["retry-after"])

                if not self._retry(attempt, retry_after):
                    raise ApiFailureBadResponse(
                        f"{requestp.url} status_code={response.status_code} ({response.reason})"
                    )
            except requests.RequestException as e:
                logger.error(
                    f"{id(self)} No Response "
                    f"{f'(retries={attempt} of {self.retries}): ' if attempt > 0 else ''}"
                    f"{url} {e}"
                )
                if not self._retry(attempt):
                    raise ApiFailureNoResponse(f"{url}: {e}") from e

        raise ApiFailureNoResponse(url)

    def post_json(self, path: str, payload: Any) -> Any:
        return self._decode(self.request(HTTPMethod.POST, path, payload))

    def get_json(self, path: str) -> Any:
        return self._decode(self.request(HTTPMethod.GET, path))

    def _decode(self, response: requests.Response) -> Any:
        if response.status_code != HTTPStatus.OK:
            raise ApiFailureBadResponse(
                f"{response.url} status_code={response.status_code} "
                f"content={response.content.decode(errors='replace')}"
            )
        try:
            return response.json()
        except requests.exceptions.JSONDecodeError as e:
            raise ApiFailureBadResponse(f"{response.url} returned non-JSON content") from e

    def _rate_limit(self) -> None:
        if not self.rate_limit:
            return
        with self.api_lock:
            elapsed_time = time.time() - self.last_request_time
            wait_time = (1 / self.rate_limit) - elapsed_time

            if wait_time > 0:
                logger.debug(f"{id(self)} Rate-limit, wait: {wait_time:.2f} seconds")
                time.sleep(wait_time)

            self.last_request_time = time.time()

    def _retry(self, attempt: int, retry_after: Optional[int] = None) -> bool:
        if attempt < self.retries:
            if retry_after:
                wait_time = retry_after
            else:
                wait_time = self.backoff_factor * (2**attempt)

            logger.debug(f"{id(self)} Back-off, wait: {wait_time:.2f} seconds")
            time.sleep(wait_time)
            return True
        return False
