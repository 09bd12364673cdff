from http import HTTPMethod
from typing import Any, Dict, Mapping

import requests

from .http_api import ApiFailureBadResponse, JsonApi


class ServerClient:
    def __init__(self, base_url: str, timeout: float = 30, retries: int = 1) -> None:
        self.api = JsonApi(base_url, timeout=timeout, retries=retries)

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "ServerClient":
        if not config.get("SERVER_URL"):
            raise ApiFailureBadResponse("SERVER_URL is not configured")
        return cls(config["SERVER_URL"], timeout=config["SERVER_TIMEOUT"])

    def queue_prompt(self, prompt: Dict[str, Any], client_id: str) -> requests.Response:
        return self.api.request(HTTPMethod.POST, "/prompt", {"prompt": prompt, "client_id": client_id})

    def object_info(self) -> Dict[str, Any]:
        info = self.api.get_json("/object_info")
        if not isinstance(info, dict):
            raise ApiFailureBadResponse("/object_info did not return an object")
        return info
