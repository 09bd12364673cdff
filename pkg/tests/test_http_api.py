from http import HTTPMethod

import pytest

from app.http_api import ApiFailureBadResponse, ApiFailureNoResponse, JsonApi

BASE = "http://api.invalid/v1"


def test_url():
    api = JsonApi(BASE)
    assert api.url() == BASE
    assert api.url("/object_info") == f"{BASE}/object_info"
    assert JsonApi(BASE + "/").url("prompt") == f"{BASE}/prompt"


def test_get_json(http_stub, response):
    http_stub.on("GET", f"{BASE}/object_info", response(200, {"KSampler": {}}))
    assert JsonApi(BASE).get_json("object_info") == {"KSampler": {}}


def test_server_errors_are_retried(http_stub, response):
    http_stub.on("POST", f"{BASE}/embed", [response(503, {}), response(500, {}), response(200, {"ok": True})])
    assert JsonApi(BASE, retries=2).post_json("embed", {"text": "x"}) == {"ok": True}
    assert len(http_stub.requests) == 3


def test_rate_limited_response_honours_retry_after(http_stub, response, monkeypatch):
    waits = []
    monkeypatch.setattr("time.sleep", waits.append)
    limited = response(429, {})
    limited.headers["Retry-After"] = "7"
    http_stub.on("GET", f"{BASE}/queue", [limited, response(200, {"queue": []})])
    assert JsonApi(BASE, retries=1).get_json("queue") == {"queue": []}
    assert waits == [7]


def test_retries_exhausted(http_stub, response):
    http_stub.on("GET", f"{BASE}/queue", response(502, {}))
    with pytest.raises(ApiFailureBadResponse):
        JsonApi(BASE, retries=1).get_json("queue")
    assert len(http_stub.requests) == 2


def test_no_response(http_stub):
    with pytest.raises(ApiFailureNoResponse) as e:
        JsonApi(BASE, retries=2).get_json("queue")
    assert len(http_stub.requests) == 3
    assert e.value.__cause__ is not None


def test_client_errors_are_handed_back(http_stub, response):
    http_stub.on("POST", f"{BASE}/prompt", response(400, {"error": "bad prompt"}))
    api = JsonApi(BASE, retries=3)
    assert api.request(HTTPMethod.POST, "prompt", {}).status_code == 400
    assert len(http_stub.requests) == 1
    with pytest.raises(ApiFailureBadResponse):
        api.post_json("prompt", {})


def test_non_json_body(http_stub, response):
    http_stub.on("GET", BASE, response(200, text="<html>"))
    with pytest.raises(ApiFailureBadResponse):
        JsonApi(BASE).get_json("")


def test_sensitive_headers_are_redacted():
    api = JsonApi(BASE)
    text = api._format_headers({"Authorization": "Bearer abc", "X-Api-Key": "k1", "Content-Type": "json"})
    assert "abc" not in text and "k1" not in text
    assert "##########" in text and "'Content-Type': 'json'" in text


def test_session_sends_configured_headers(http_stub, response):
    http_stub.on("GET", BASE, response(200, {}))
    JsonApi(BASE, headers={"Authorization": "Bearer t"}).get_json("")
    assert http_stub.requests[0].headers["Authorization"] == "Bearer t"
