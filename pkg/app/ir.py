"""Graph IR for ComfyUI workflows.

Two representations live here: the full ComfyUI export graph (nodes with slots,
widget values and a 6-element link table) and the compact link-list diagram
where each link is ``[out_node, out_port, in_node, in_port]``.
"""

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Union

from .constants import WILDCARD_TYPE
from .util import ComfyFlowError

NODE_REF_RE = re.compile(r"^(.+)_(0|[1-9][0-9]*)$", re.DOTALL)

NODE_KEYS = ("id", "type", "mode", "inputs", "outputs", "widgets_values")
INPUT_KEYS = ("name", "type", "link")
OUTPUT_KEYS = ("name", "type", "links")


class IrError(ComfyFlowError):
    pass


class MalformedJson(IrError):
    pass


class SchemaViolation(IrError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class BadLinkArity(SchemaViolation):
    pass


class InvalidName(SchemaViolation):
    pass


class DuplicateInputSlot(IrError):
    def __init__(self, subject: str) -> None:
        super().__init__(f"input slot {subject} has more than one producer")
        self.subject = subject


class NonDenseOrdinals(IrError):
    def __init__(self, type_name: str, ordinals: List[int]) -> None:
        super().__init__(f"ordinals for {type_name!r} are not 0..{len(ordinals) - 1}: {ordinals}")
        self.type_name = type_name


class EmptyDiagram(IrError):
    def __init__(self) -> None:
        super().__init__("diagram has no links")


class NodeMode(IntEnum):
    NORMAL = 0
    ON_EVENT = 1
    MUTE = 2
    ON_TRIGGER = 3
    BYPASS = 4

    @property
    def skipped(self) -> bool:
        return self in (NodeMode.MUTE, NodeMode.BYPASS)


# ── Graph workflow ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class NodeInput:
    port: str
    value_type: str
    link: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_widget(self) -> bool:
        return "widget" in self.extra


@dataclass(frozen=True)
class NodeOutput:
    port: str
    value_type: str
    links: Tuple[int, ...] = ()
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GraphNode:
    id: int
    type_name: str
    mode: NodeMode = NodeMode.NORMAL
    inputs: Tuple[NodeInput, ...] = ()
    outputs: Tuple[NodeOutput, ...] = ()
    widget_values: Tuple[Any, ...] = ()
    extra: Dict[str, Any] = field(default_factory=dict)

    def input_slot(self, port: str) -> Optional[int]:
        for slot, node_input in enumerate(self.inputs):
            if node_input.port == port:
                return slot
        return None

    def output_slot(self, port: str) -> Optional[int]:
        for slot, node_output in enumerate(self.outputs):
            if node_output.port == port:
                return slot
        return None


@dataclass(frozen=True)
class GraphLink:
    id: int
    src_node_id: int
    src_slot: int
    dst_node_id: int
    dst_slot: int
    value_type: str

    def to_list(self) -> List[Any]:
        return [
            self.id,
            self.src_node_id,
            self.src_slot,
            self.dst_node_id,
            self.dst_slot,
            self.value_type,
        ]


@dataclass(frozen=True)
class GraphWorkflow:
    nodes: Tuple[GraphNode, ...] = ()
    links: Tuple[GraphLink, ...] = ()
    extra: Dict[str, Any] = field(default_factory=dict)

    @cached_property
    def nodes_by_id(self) -> Dict[int, GraphNode]:
        return {node.id: node for node in self.nodes}

    @cached_property
    def links_by_id(self) -> Dict[int, GraphLink]:
        return {link.id: link for link in self.links}


def load_json(data: Union[bytes, str]) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedJson(f"not UTF-8: {e}") from e
    try:
        return json.loads(data)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"line {e.lineno} column {e.colno}: {e.msg}") from e


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_port(name: Any, path: str) -> str:
    if not isinstance(name, str) or not name or name != name.strip():
        raise InvalidName(path, f"bad port name {name!r}")
    return name


def _check_slot_name(name: Any, path: str) -> str:
    # Reroute slots are exported with an empty name
    if name == "":
        return name
    return _check_port(name, path)


def _check_type(value_type: Any, path: str) -> str:
    if not isinstance(value_type, str):
        raise SchemaViolation(path, f"value type must be a string, got {value_type!r}")
    return value_type


def _input_from_obj(obj: Any, path: str) -> NodeInput:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "input slot must be an object")
    link = obj.get("link")
    if link is not None and not _is_int(link):
        raise SchemaViolation(f"{path}/link", f"link must be an integer or null, got {link!r}")
    return NodeInput(
        port=_check_slot_name(obj.get("name"), f"{path}/name"),
        value_type=_check_type(obj.get("type"), f"{path}/type"),
        link=link,
        extra={k: v for k, v in obj.items() if k not in INPUT_KEYS},
    )


def _output_from_obj(obj: Any, path: str) -> NodeOutput:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "output slot must be an object")
    links = obj.get("links") or []
    if not isinstance(links, list) or not all(_is_int(link) for link in links):
        raise SchemaViolation(f"{path}/links", "links must be a list of integers")
    return NodeOutput(
        port=_check_slot_name(obj.get("name"), f"{path}/name"),
        value_type=_check_type(obj.get("type"), f"{path}/type"),
        links=tuple(links),
        extra={k: v for k, v in obj.items() if k not in OUTPUT_KEYS},
    )


def _node_from_obj(obj: Any, path: str) -> GraphNode:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "node must be an object")

    node_id = obj.get("id")
    if not _is_int(node_id) or node_id <= 0:
        raise SchemaViolation(f"{path}/id", f"node id must be a positive integer, got {node_id!r}")

    type_name = obj.get("type")
    if not isinstance(type_name, str) or not type_name:
        raise SchemaViolation(f"{path}/type", "node type must be a non-empty string")

    try:
        mode = NodeMode(obj.get("mode", 0))
    except ValueError as e:
        raise SchemaViolation(f"{path}/mode", f"unknown mode {obj.get('mode')!r}") from e

    inputs = obj.get("inputs") or []
    outputs = obj.get("outputs") or []
    if not isinstance(inputs, list):
        raise SchemaViolation(f"{path}/inputs", "inputs must be a list")
    if not isinstance(outputs, list):
        raise SchemaViolation(f"{path}/outputs", "outputs must be a list")

    extra = {k: v for k, v in obj.items() if k not in NODE_KEYS}
    widget_values = obj.get("widgets_values", [])
    if not isinstance(widget_values, list):
        # dict-shaped widget values are kept as-is
        extra["widgets_values"] = widget_values
        widget_values = []

    return GraphNode(
        id=node_id,
        type_name=type_name,
        mode=mode,
        inputs=tuple(_input_from_obj(o, f"{path}/inputs/{i}") for i, o in enumerate(inputs)),
        outputs=tuple(_output_from_obj(o, f"{path}/outputs/{i}") for i, o in enumerate(outputs)),
        widget_values=tuple(widget_values),
        extra=extra,
    )


def _link_from_obj(obj: Any, path: str) -> GraphLink:
    if not isinstance(obj, list) or len(obj) != 6:
        raise SchemaViolation(path, "link entry must be a 6-element array")
    for i in range(5):
        if not _is_int(obj[i]) or obj[i] < 0:
            raise SchemaViolation(f"{path}/{i}", f"expected a non-negative integer, got {obj[i]!r}")
    return GraphLink(
        id=obj[0],
        src_node_id=obj[1],
        src_slot=obj[2],
        dst_node_id=obj[3],
        dst_slot=obj[4],
        value_type=_check_type(obj[5], f"{path}/5"),
    )


def _check_unique(names: Iterable[str], path: str) -> None:
    seen: Set[str] = set()
    for i, name in enumerate(names):
        if name in seen:
            raise SchemaViolation(f"{path}/{i}/name", f"duplicate port name {name!r}")
        seen.add(name)


def check_graph(g: GraphWorkflow, path: str = "") -> None:
    """Raise SchemaViolation unless every GraphWorkflow invariant holds."""
    node_index: Dict[int, int] = {}
    for i, node in enumerate(g.nodes):
        if node.id in node_index:
            raise SchemaViolation(f"{path}/nodes/{i}/id", f"duplicate node id {node.id}")
        node_index[node.id] = i
        _check_unique((o.port for o in node.inputs), f"{path}/nodes/{i}/inputs")
        _check_unique((o.port for o in node.outputs), f"{path}/nodes/{i}/outputs")

    link_ids: Set[int] = set()
    fed_slots: Dict[Tuple[int, int], int] = {}
    for i, link in enumerate(g.links):
        link_path = f"{path}/links/{i}"
        if link.id in link_ids:
            raise SchemaViolation(f"{link_path}/0", f"duplicate link id {link.id}")
        link_ids.add(link.id)

        if link.src_node_id not in node_index:
            raise SchemaViolation(f"{link_path}/1", f"no node with id {link.src_node_id}")
        src = g.nodes[node_index[link.src_node_id]]
        if link.src_slot >= len(src.outputs):
            raise SchemaViolation(f"{link_path}/2", f"node {src.id} has no output {link.src_slot}")

        if link.dst_node_id not in node_index:
            raise SchemaViolation(f"{link_path}/3", f"no node with id {link.dst_node_id}")
        dst = g.nodes[node_index[link.dst_node_id]]
        if link.dst_slot >= len(dst.inputs):
            raise SchemaViolation(f"{link_path}/4", f"node {dst.id} has no input {link.dst_slot}")
        slot_key = (link.dst_node_id, link.dst_slot)
        if slot_key in fed_slots:
            raise SchemaViolation(
                f"{link_path}/4",
                f"input {link.dst_slot} of node {dst.id} is already fed by link {fed_slots[slot_key]}",
            )
        fed_slots[slot_key] = link.id
        slot_link = dst.inputs[link.dst_slot].link
        if slot_link is not None and slot_link != link.id:
            raise SchemaViolation(
                f"{link_path}/0",
                f"input {link.dst_slot} of node {dst.id} refers to link {slot_link}, not {link.id}",
            )

        declared = src.outputs[link.src_slot].value_type
        if WILDCARD_TYPE not in (declared, link.value_type) and declared != link.value_type:
            raise SchemaViolation(
                f"{link_path}/5", f"link type {link.value_type!r} differs from output {declared!r}"
            )

    for i, node in enumerate(g.nodes):
        for j, node_input in enumerate(node.inputs):
            if node_input.link is not None and node_input.link not in link_ids:
                raise SchemaViolation(
                    f"{path}/nodes/{i}/inputs/{j}/link", f"no link with id {node_input.link}"
                )


def graph_workflow_from_obj(obj: Any, path: str = "") -> GraphWorkflow:
    if not isinstance(obj, dict):
        raise SchemaViolation(path or "/", "workflow must be an object")
    for key in ("nodes", "links"):
        if not isinstance(obj.get(key), list):
            raise SchemaViolation(f"{path}/{key}", f"missing {key} array")

    g = GraphWorkflow(
        nodes=tuple(_node_from_obj(n, f"{path}/nodes/{i}") for i, n in enumerate(obj["nodes"])),
        links=tuple(_link_from_obj(lk, f"{path}/links/{i}") for i, lk in enumerate(obj["links"])),
        extra={k: v for k, v in obj.items() if k not in ("nodes", "links")},
    )
    check_graph(g, path)
    return g


def parse_graph_workflow(data: Union[bytes, str]) -> GraphWorkflow:
    return graph_workflow_from_obj(load_json(data))


def _node_to_obj(node: GraphNode) -> Dict[str, Any]:
    obj: Dict[str, Any] = {"id": node.id, "type": node.type_name}
    obj.update(node.extra)
    obj["mode"] = int(node.mode)
    obj["inputs"] = [
        {"name": o.port, "type": o.value_type, "link": o.link, **o.extra} for o in node.inputs
    ]
    obj["outputs"] = [
        {"name": o.port, "type": o.value_type, "links": list(o.links), **o.extra}
        for o in node.outputs
    ]
    if "widgets_values" not in node.extra:
        obj["widgets_values"] = list(node.widget_values)
    return obj


def graph_workflow_to_obj(g: GraphWorkflow) -> Dict[str, Any]:
    obj: Dict[str, Any] = {
        "nodes": [_node_to_obj(node) for node in g.nodes],
        "links": [link.to_list() for link in g.links],
    }
    obj.update(g.extra)
    return obj


def emit_graph_workflow(g: GraphWorkflow) -> bytes:
    return json.dumps(graph_workflow_to_obj(g), ensure_ascii=False, indent=2).encode("utf-8")


def assign_node_refs(nodes: Iterable[GraphNode]) -> Dict[int, "NodeRef"]:
    """Number nodes per type by ascending node id, starting at 0."""
    counters: Dict[str, int] = defaultdict(int)
    refs = {}
    for node in sorted(nodes, key=lambda n: n.id):
        refs[node.id] = NodeRef(node.type_name, counters[node.type_name])
        counters[node.type_name] += 1
    return refs


# ── Diagram ───────────────────────────────────────────────────────────────────


@dataclass(frozen=True, order=True)
class NodeRef:
    type_name: str
    ordinal: int

    def __post_init__(self) -> None:
        if not isinstance(self.type_name, str) or not self.type_name:
            raise InvalidName("", f"bad node type name {self.type_name!r}")
        if not _is_int(self.ordinal) or self.ordinal < 0:
            raise InvalidName("", f"bad ordinal {self.ordinal!r}")

    def __str__(self) -> str:
        return f"{self.type_name}_{self.ordinal}"

    @classmethod
    def parse(cls, text: Any, path: str = "") -> "NodeRef":
        match = NODE_REF_RE.match(text) if isinstance(text, str) else None
        if match is None:
            raise InvalidName(path, f"node reference {text!r} lacks a _<ordinal> suffix")
        return cls(match.group(1), int(match.group(2)))


@dataclass(frozen=True)
class Link:
    out_node: NodeRef
    out_port: str
    in_node: NodeRef
    in_port: str

    def __post_init__(self) -> None:
        _check_port(self.out_port, "out_port")
        _check_port(self.in_port, "in_port")

    def to_list(self) -> List[str]:
        return [str(self.out_node), self.out_port, str(self.in_node), self.in_port]

    @classmethod
    def from_list(cls, entry: Any, path: str = "") -> "Link":
        if not isinstance(entry, list) or len(entry) != 4:
            raise BadLinkArity(path, "link must be a 4-element array")
        if not all(isinstance(item, str) for item in entry):
            raise BadLinkArity(path, "link elements must be strings")
        return cls(
            NodeRef.parse(entry[0], f"{path}/0"),
            _check_port(entry[1], f"{path}/1"),
            NodeRef.parse(entry[2], f"{path}/2"),
            _check_port(entry[3], f"{path}/3"),
        )


@dataclass(frozen=True, eq=False)
class WorkflowDiagram:
    links: Tuple[Link, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "links", tuple(self.links))

        producers: Set[Tuple[NodeRef, str]] = set()
        for link in self.links:
            slot = (link.in_node, link.in_port)
            if slot in producers:
                raise DuplicateInputSlot(f"{link.in_node}/{link.in_port}")
            producers.add(slot)

        ordinals: Dict[str, Set[int]] = defaultdict(set)
        for ref in self.node_refs():
            ordinals[ref.type_name].add(ref.ordinal)
        for type_name, seen in ordinals.items():
            if seen != set(range(len(seen))):
                raise NonDenseOrdinals(type_name, sorted(seen))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorkflowDiagram):
            return NotImplemented
        return frozenset(self.links) == frozenset(other.links)

    def __hash__(self) -> int:
        return hash(frozenset(self.links))

    def __len__(self) -> int:
        return len(self.links)

    def node_refs(self) -> List[NodeRef]:
        refs: Dict[NodeRef, None] = {}
        for link in self.links:
            refs.setdefault(link.out_node)
            refs.setdefault(link.in_node)
        return list(refs)

    def type_names(self) -> List[str]:
        return list(dict.fromkeys(ref.type_name for ref in self.node_refs()))


def diagram_from_obj(obj: Any) -> WorkflowDiagram:
    if not isinstance(obj, list):
        raise BadLinkArity("/", "diagram must be an array of links")
    return WorkflowDiagram(tuple(Link.from_list(entry, f"/{i}") for i, entry in enumerate(obj)))


def parse_diagram(data: Union[bytes, str]) -> WorkflowDiagram:
    return diagram_from_obj(load_json(data))


def diagram_to_obj(d: WorkflowDiagram) -> List[List[str]]:
    return [link.to_list() for link in d.links]


def emit_diagram(d: WorkflowDiagram) -> bytes:
    return json.dumps(diagram_to_obj(d), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def check_structure(d: WorkflowDiagram) -> None:
    """Structural acceptance beyond construction: a workflow needs at least one link."""
    if not d.links:
        raise EmptyDiagram()
