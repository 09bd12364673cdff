import json
import os
from collections import defaultdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pytest
import requests

from app import create_app
from app.ir import GraphWorkflow, WorkflowDiagram, graph_workflow_from_obj, parse_diagram
from app.nodebase import NodeBase, NodeSpec, TrigramEmbeddingProvider, build_base, parse_specs

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)


def read_data(name: str) -> bytes:
    with open(data_path(name), "rb") as f:
        return f.read()


# ── App ───────────────────────────────────────────────────────────────────────


@pytest.fixture
def app(tmp_path):
    app = create_app("testing", instance_path=str(tmp_path / "instance"))
    yield app


@pytest.fixture
def app_ctx(app):
    with app.app_context():
        yield app


@pytest.fixture
def cli_env(monkeypatch, tmp_path):
    """Environment for driver.run(): testing config and a throwaway instance directory."""
    monkeypatch.setenv("FLASK_CONFIG", "testing")
    monkeypatch.setenv("COMFYFLOW_INSTANCE_PATH", str(tmp_path / "instance"))
    for key in list(os.environ):
        if key.startswith("COMFYFLOW_") and key != "COMFYFLOW_INSTANCE_PATH":
            monkeypatch.delenv(key)
    return tmp_path


# ── Node databases and diagrams ───────────────────────────────────────────────


@pytest.fixture
def provider():
    return TrigramEmbeddingProvider()


@pytest.fixture
def sd_specs() -> List[NodeSpec]:
    return parse_specs(read_data("sd_nodes.json"))


@pytest.fixture
def sd_base(sd_specs, provider) -> NodeBase:
    return build_base(sd_specs, provider)


@pytest.fixture
def sd_diagram() -> WorkflowDiagram:
    return parse_diagram(read_data("sd_diagram.json"))


@pytest.fixture
def appendix_diagram() -> WorkflowDiagram:
    return parse_diagram(read_data("flowagent_diagram.json"))


def specs_for_diagram(d: WorkflowDiagram, exclude: Sequence[str] = ()) -> List[NodeSpec]:
    """Untyped specs that declare exactly the ports a diagram uses."""
    inputs: Dict[str, Dict[str, None]] = defaultdict(dict)
    outputs: Dict[str, Dict[str, None]] = defaultdict(dict)
    for link in d.links:
        outputs[link.out_node.type_name][link.out_port] = None
        inputs[link.in_node.type_name][link.in_port] = None
    return [
        NodeSpec(name, tuple(inputs[name]), tuple(outputs[name]))
        for name in d.type_names()
        if name not in exclude
    ]


@pytest.fixture
def candidate_specs() -> List[NodeSpec]:
    return parse_specs(read_data("refine_candidates.json"))


@pytest.fixture
def candidate_base(appendix_diagram, candidate_specs, provider) -> NodeBase:
    """Every appendix node except ReplaceString, plus the five replacement candidates."""
    specs = specs_for_diagram(appendix_diagram, exclude=("ReplaceString",))
    return build_base(specs + candidate_specs, provider)


@pytest.fixture
def appendix_base(appendix_diagram, provider) -> NodeBase:
    return build_base(specs_for_diagram(appendix_diagram), provider)


# ── Graph workflows ───────────────────────────────────────────────────────────

NodeDef = Tuple[int, str, Sequence[Tuple[str, str]], Sequence[Tuple[str, str]]]
LinkDef = Tuple[int, int, int, int, int, str]


def graph_obj(
    nodes: Sequence[Any],
    links: Sequence[LinkDef],
    modes: Optional[Dict[int, int]] = None,
    widgets: Optional[Dict[int, Sequence[Any]]] = None,
) -> Dict[str, Any]:
    """ComfyUI export dict; slot link ids are derived from the link table.

    Each node is (id, type, [(input, type), ...], [(output, type), ...]).
    Inputs named with a leading "=" are widget-converted slots.
    """
    modes = modes or {}
    widgets = widgets or {}
    in_link = {(lk[3], lk[4]): lk[0] for lk in links}
    out_links: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for lk in links:
        out_links[(lk[1], lk[2])].append(lk[0])

    node_objs = []
    for node_id, type_name, inputs, outputs in nodes:
        input_objs = []
        for slot, (name, value_type) in enumerate(inputs):
            obj: Dict[str, Any] = {"name": name.lstrip("="), "type": value_type}
            obj["link"] = in_link.get((node_id, slot))
            if name.startswith("="):
                obj["widget"] = {"name": name.lstrip("=")}
            input_objs.append(obj)
        node_objs.append(
            {
                "id": node_id,
                "type": type_name,
                "pos": [node_id * 10, 0],
                "mode": modes.get(node_id, 0),
                "inputs": input_objs,
                "outputs": [
                    {"name": name, "type": value_type, "links": out_links.get((node_id, slot), [])}
                    for slot, (name, value_type) in enumerate(outputs)
                ],
                "widgets_values": list(widgets.get(node_id, [])),
            }
        )
    return {
        "last_node_id": max((n[0] for n in nodes), default=0),
        "last_link_id": max((lk[0] for lk in links), default=0),
        "nodes": node_objs,
        "links": [list(lk) for lk in links],
        "version": 0.4,
    }


@pytest.fixture
def make_graph() -> Callable[..., GraphWorkflow]:
    def make(nodes, links, modes=None, widgets=None) -> GraphWorkflow:
        return graph_workflow_from_obj(graph_obj(nodes, links, modes, widgets))

    return make


@pytest.fixture
def make_graph_obj() -> Callable[..., Dict[str, Any]]:
    return graph_obj


# ── HTTP ──────────────────────────────────────────────────────────────────────


def make_response(
    status_code: int = 200, body: Any = None, url: str = "http://stub.invalid/", text: str = ""
) -> requests.Response:
    response = requests.Response()
    response.status_code = status_code
    response.url = url
    response.reason = "OK" if status_code == 200 else "Error"
    if body is not None:
        response._content = json.dumps(body).encode("utf-8")
        response.headers["Content-Type"] = "application/json"
    else:
        response._content = text.encode("utf-8")
    return response


class HttpStub:
    """Replaces requests.Session.send; answers from per-URL handlers and records every request."""

    def __init__(self) -> None:
        self.handlers: Dict[Tuple[str, str], Callable[[Any], requests.Response]] = {}
        self.requests: List[Any] = []

    def on(self, method: str, url: str, handler: Any) -> None:
        if isinstance(handler, requests.Response):
            response = handler
            self.handlers[(method, url)] = lambda _request: response
        elif isinstance(handler, list):
            queue = list(handler)
            self.handlers[(method, url)] = lambda _request: queue.pop(0)
        else:
            self.handlers[(method, url)] = handler

    def payloads(self, url: str) -> List[Any]:
        return [json.loads(r.body) for r in self.requests if r.url == url and r.body]

    def send(self, request: Any, **_kwargs: Any) -> requests.Response:
        self.requests.append(request)
        handler = self.handlers.get((request.method, request.url))
        if handler is None:
            raise requests.ConnectionError(f"no stub for {request.method} {request.url}")
        response = handler(request)
        response.url = request.url
        return response


@pytest.fixture
def http_stub(monkeypatch) -> HttpStub:
    stub = HttpStub()
    monkeypatch.setattr(requests.Session, "send", lambda _self, request, **kw: stub.send(request, **kw))
    monkeypatch.setattr("time.sleep", lambda _seconds: None)
    return stub


@pytest.fixture
def response() -> Callable[..., requests.Response]:
    return make_response
