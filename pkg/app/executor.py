import json
import logging
import uuid
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from http import HTTPStatus
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

from .comfy_server import ServerClient
from .constants import WILDCARD_TYPE
from .ir import (
    GraphLink,
    GraphNode,
    GraphWorkflow,
    NodeInput,
    NodeOutput,
    NodeRef,
    WorkflowDiagram,
    assign_node_refs,
    check_graph,
    check_structure,
)
from .nodebase import NodeBase, NodeSpec
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

# Emitted after a seed widget by the ComfyUI frontend; not a node input.
CONTROL_AFTER_GENERATE = ("fixed", "increment", "decrement", "randomize")


class ExecutorError(ComfyFlowError):
    pass


class NodeUnknown(ExecutorError):
    def __init__(self, type_name: str) -> None:
        super().__init__(f"node type {type_name!r} is not in the node database")
        self.type_name = type_name


class PortUnknown(ExecutorError):
    def __init__(self, subject: str) -> None:
        super().__init__(f"port {subject} is not declared by its node spec")
        self.subject = subject


class InvalidWorkflow(ExecutorError):
    def __init__(self, report: "ValidationReport") -> None:
        codes = ", ".join(sorted({issue.code.value for issue in report.issues}))
        super().__init__(f"workflow is not executable: {codes}")
        self.report = report


class IssueCode(Enum):
    CYCLE_DETECTED = "CycleDetected"
    DUPLICATE_INPUT_SLOT = "DuplicateInputSlot"
    MISSING_REQUIRED_INPUT = "MissingRequiredInput"
    NODE_UNKNOWN = "NodeUnknown"
    PORT_UNKNOWN = "PortUnknown"
    TYPE_MISMATCH = "TypeMismatch"


@dataclass(frozen=True)
class Issue:
    code: IssueCode
    subject: str
    message: str

    def sort_key(self) -> Tuple[str, str, str]:
        return self.code.value, self.subject, self.message

    def to_obj(self) -> Dict[str, str]:
        return {"code": self.code.value, "subject": self.subject, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    issues: Tuple[Issue, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.issues

    def codes(self) -> Set[IssueCode]:
        return {issue.code for issue in self.issues}

    def to_obj(self) -> Dict[str, Any]:
        return {"valid": self.valid, "issues": [issue.to_obj() for issue in self.issues]}


@dataclass(frozen=True)
class Accepted:
    prompt_id: str


@dataclass(frozen=True)
class Rejected:
    message: str


SubmitOutcome = Union[Accepted, Rejected]


# ── Lift ──────────────────────────────────────────────────────────────────────


def _node_order(d: WorkflowDiagram) -> List[NodeRef]:
    """First-appearance positions, with each type's refs placed in ordinal order.

    Keeps to_diagram(lift(d)) == d since to_diagram numbers by ascending id.
    """
    order = d.node_refs()
    by_type: Dict[str, List[NodeRef]] = defaultdict(list)
    for ref in order:
        by_type[ref.type_name].append(ref)
    queues = {type_name: iter(sorted(refs)) for type_name, refs in by_type.items()}
    return [next(queues[ref.type_name]) for ref in order]


def _port_types(names: Sequence[str], types: Optional[Sequence[str]]) -> List[str]:
    return list(types) if types is not None else [WILDCARD_TYPE] * len(names)


def lift(d: WorkflowDiagram, base: NodeBase) -> GraphWorkflow:
    check_structure(d)

    specs: Dict[NodeRef, NodeSpec] = {}
    for ref in d.node_refs():
        spec = base.lookup(ref.type_name)
        if spec is None:
            raise NodeUnknown(ref.type_name)
        specs[ref] = spec
    for link in d.links:
        if link.out_port not in specs[link.out_node].output_names:
            raise PortUnknown(f"{link.out_node}/{link.out_port}")
        if link.in_port not in specs[link.in_node].input_names:
            raise PortUnknown(f"{link.in_node}/{link.in_port}")

    ids = {ref: i for i, ref in enumerate(_node_order(d), start=1)}

    links = []
    out_links: Dict[Tuple[NodeRef, str], List[int]] = defaultdict(list)
    in_link: Dict[Tuple[NodeRef, str], int] = {}
    for link_id, link in enumerate(d.links, start=1):
        src_spec = specs[link.out_node]
        dst_spec = specs[link.in_node]
        links.append(
            GraphLink(
                link_id,
                ids[link.out_node],
                src_spec.output_names.index(link.out_port),
                ids[link.in_node],
                dst_spec.input_names.index(link.in_port),
                src_spec.output_type(link.out_port) or WILDCARD_TYPE,
            )
        )
        out_links[(link.out_node, link.out_port)].append(link_id)
        in_link[(link.in_node, link.in_port)] = link_id

    nodes = []
    for ref, node_id in sorted(ids.items(), key=lambda item: item[1]):
        spec = specs[ref]
        inputs = []
        widget_values = []
        for port, value_type in zip(spec.input_names, _port_types(spec.input_names, spec.input_types)):
            link_id = in_link.get((ref, port))
            extra: Dict[str, Any] = {}
            if link_id is None and spec.has_default(port):
                extra["widget"] = {"name": port}
                widget_values.append(spec.default(port))
            inputs.append(NodeInput(port, value_type, link_id, extra))
        outputs = [
            NodeOutput(port, value_type, tuple(out_links.get((ref, port), ())))
            for port, value_type in zip(
                spec.output_names, _port_types(spec.output_names, spec.output_types)
            )
        ]
        nodes.append(
            GraphNode(
                id=node_id,
                type_name=spec.node_name,
                inputs=tuple(inputs),
                outputs=tuple(outputs),
                widget_values=tuple(widget_values),
            )
        )

    g = GraphWorkflow(
        tuple(nodes),
        tuple(links),
        {"last_node_id": len(nodes), "last_link_id": len(links), "version": 0.4},
    )
    check_graph(g)
    return g


# ── Validation ────────────────────────────────────────────────────────────────


def types_compatible(a: Optional[str], b: Optional[str]) -> bool:
    if a is None or b is None or WILDCARD_TYPE in (a, b) or a == b:
        return True
    return bool(set(a.split(",")) & set(b.split(",")))


def _link_subject(g: GraphWorkflow, refs: Dict[int, NodeRef], link: GraphLink) -> str:
    src = g.nodes_by_id[link.src_node_id]
    dst = g.nodes_by_id[link.dst_node_id]
    return (
        f"{refs[src.id]}/{src.outputs[link.src_slot].port}"
        f"->{refs[dst.id]}/{dst.inputs[link.dst_slot].port}"
    )


def _find_cycles(g: GraphWorkflow, refs: Dict[int, NodeRef]) -> List[str]:
    successors: Dict[int, List[int]] = defaultdict(list)
    for link in sorted(g.links, key=lambda lk: lk.id):
        successors[link.src_node_id].append(link.dst_node_id)

    white, grey, black = 0, 1, 2
    color = {node.id: white for node in g.nodes}
    cycles: Set[Tuple[int, ...]] = set()

    for root in sorted(color):
        if color[root] != white:
            continue
        path = [root]
        stack = [(root, iter(successors[root]))]
        color[root] = grey
        while stack:
            node_id, children = stack[-1]
            child = next(children, None)
            if child is None:
                color[node_id] = black
                stack.pop()
                path.pop()
            elif color[child] == grey:
                cycle = path[path.index(child) :]
                start = cycle.index(min(cycle))
                cycles.add(tuple(cycle[start:] + cycle[:start]))
            elif color[child] == white:
                color[child] = grey
                path.append(child)
                stack.append((child, iter(successors[child])))

    return sorted("->".join(str(refs[i]) for i in cycle + (cycle[0],)) for cycle in cycles)


def _structural_issues(g: GraphWorkflow, refs: Dict[int, NodeRef]) -> List[Issue]:
    issues = []
    producers: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for link in g.links:
        producers[(link.dst_node_id, link.dst_slot)].append(link.id)
    for (node_id, slot), link_ids in producers.items():
        if len(link_ids) > 1:
            port = g.nodes_by_id[node_id].inputs[slot].port
            issues.append(
                Issue(
                    IssueCode.DUPLICATE_INPUT_SLOT,
                    f"{refs[node_id]}/{port}",
                    f"fed by links {sorted(link_ids)}",
                )
            )
    for cycle in _find_cycles(g, refs):
        issues.append(Issue(IssueCode.CYCLE_DETECTED, cycle, "workflow graph is not acyclic"))
    return issues


def _input_satisfied(node: GraphNode, spec: NodeSpec, port: str, linked: Set[str]) -> bool:
    if port in linked or spec.has_default(port):
        return True
    if not node.widget_values:
        return False
    slot = node.input_slot(port)
    if slot is None:
        # widgets that were never converted to inputs only appear in widgets_values
        return spec.is_widget_input(port)
    return node.inputs[slot].is_widget


def validate_executable(
    g: GraphWorkflow, base: NodeBase, strict_types: bool = False
) -> ValidationReport:
    refs = assign_node_refs(g.nodes)
    issues = _structural_issues(g, refs)

    linked_ports: Dict[int, Set[str]] = defaultdict(set)
    for link in g.links:
        dst = g.nodes_by_id[link.dst_node_id]
        linked_ports[dst.id].add(dst.inputs[link.dst_slot].port)

    for node in g.nodes:
        spec = base.lookup(node.type_name)
        if spec is None:
            issues.append(
                Issue(IssueCode.NODE_UNKNOWN, str(refs[node.id]), f"unknown node type {node.type_name!r}")
            )
            continue
        for port in spec.required_inputs or ():
            if not _input_satisfied(node, spec, port, linked_ports[node.id]):
                issues.append(
                    Issue(
                        IssueCode.MISSING_REQUIRED_INPUT,
                        f"{refs[node.id]}/{port}",
                        "required input has no link and no widget value",
                    )
                )

    for link in g.links:
        src = g.nodes_by_id[link.src_node_id]
        dst = g.nodes_by_id[link.dst_node_id]
        out_port = src.outputs[link.src_slot].port
        in_port = dst.inputs[link.dst_slot].port
        src_spec = base.lookup(src.type_name)
        dst_spec = base.lookup(dst.type_name)

        if src_spec is not None and out_port not in src_spec.output_names:
            issues.append(
                Issue(IssueCode.PORT_UNKNOWN, f"{refs[src.id]}/{out_port}", "output not in spec")
            )
        if dst_spec is not None and in_port not in dst_spec.input_names:
            issues.append(
                Issue(IssueCode.PORT_UNKNOWN, f"{refs[dst.id]}/{in_port}", "input not in spec")
            )

        out_type = src_spec.output_type(out_port) if src_spec is not None else None
        in_type = dst_spec.input_type(in_port) if dst_spec is not None else None
        if strict_types:
            out_type = out_type or src.outputs[link.src_slot].value_type
            in_type = in_type or dst.inputs[link.dst_slot].value_type
        if not types_compatible(out_type, in_type):
            issues.append(
                Issue(
                    IssueCode.TYPE_MISMATCH,
                    _link_subject(g, refs, link),
                    f"{out_type} is not accepted by {in_type}",
                )
            )

    return ValidationReport(tuple(sorted(set(issues), key=Issue.sort_key)))


# ── Server prompt format ──────────────────────────────────────────────────────


def _widget_ports(node: GraphNode, spec: Optional[NodeSpec]) -> List[str]:
    flagged = [o.port for o in node.inputs if o.is_widget]
    if flagged or spec is None:
        return flagged
    node_ports = {o.port for o in node.inputs}
    return [
        port for port in spec.input_names if port not in node_ports or spec.has_default(port)
    ]


def _widget_values(node: GraphNode) -> List[Any]:
    values: List[Any] = []
    for value in node.widget_values:
        if (
            value in CONTROL_AFTER_GENERATE
            and values
            and isinstance(values[-1], int)
            and not isinstance(values[-1], bool)
        ):
            continue
        values.append(value)
    return values


def api_prompt(g: GraphWorkflow, base: Optional[NodeBase] = None) -> Dict[str, Any]:
    if base is not None:
        report = validate_executable(g, base)
    else:
        report = ValidationReport(tuple(_structural_issues(g, assign_node_refs(g.nodes))))
    if not report.valid:
        raise InvalidWorkflow(report)

    prompt: Dict[str, Any] = {}
    for node in sorted(g.nodes, key=lambda n: n.id):
        spec = base.lookup(node.type_name) if base is not None else None
        inputs: Dict[str, Any] = {}
        for port, value in zip(_widget_ports(node, spec), _widget_values(node)):
            inputs[port] = value
        for node_input in node.inputs:
            if node_input.link is not None:
                link = g.links_by_id[node_input.link]
                inputs[node_input.port] = [str(link.src_node_id), link.src_slot]
        prompt[str(node.id)] = {"class_type": node.type_name, "inputs": inputs}
    return prompt


def to_api_format(g: GraphWorkflow, base: Optional[NodeBase] = None) -> bytes:
    return json.dumps(api_prompt(g, base), ensure_ascii=False, indent=2).encode("utf-8")


def submit(g: GraphWorkflow, server: ServerClient, base: Optional[NodeBase] = None) -> SubmitOutcome:
    prompt = api_prompt(g, base)
    client_id = str(uuid.uuid4())
    response = server.queue_prompt(prompt, client_id)

    if response.status_code == HTTPStatus.OK:
        try:
            prompt_id = response.json().get("prompt_id")
        except (ValueError, AttributeError):
            prompt_id = None
        if prompt_id:
            logger.info("Prompt accepted: prompt_id=%s client_id=%s", prompt_id, client_id)
            return Accepted(str(prompt_id))

    logger.warning("Prompt rejected: status_code=%s", response.status_code)
    return Rejected(response.text)


def submit_many(
    graphs: Sequence[GraphWorkflow],
    server: ServerClient,
    base: Optional[NodeBase] = None,
    parallelism: int = 4,
) -> List[Union[SubmitOutcome, Exception]]:
    def submit_one(g: GraphWorkflow) -> Union[SubmitOutcome, Exception]:
        try:
            return submit(g, server, base)
        except ComfyFlowError as e:
            return e

    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        return list(executor.map(submit_one, graphs))
