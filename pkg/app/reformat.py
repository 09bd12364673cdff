import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .constants import WILDCARD_TYPE
from .executor import validate_executable
from .ir import (
    GraphLink,
    GraphNode,
    GraphWorkflow,
    Link,
    WorkflowDiagram,
    assign_node_refs,
)
from .nodebase import NodeBase
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

NOTE_TYPES = ("Note", "MarkdownNote")
REROUTE_TYPES = ("Reroute",)
BROADCASTER_TYPES = ("Anything Everywhere", "Anything Everywhere?", "Anything Everywhere3")


class CleaningError(ComfyFlowError):
    pass


class AmbiguousBroadcast(CleaningError):
    def __init__(self, value_type: str, broadcaster_ids: List[int]) -> None:
        super().__init__(f"{len(broadcaster_ids)} broadcasters offer {value_type}: {broadcaster_ids}")
        self.value_type = value_type
        self.broadcaster_ids = broadcaster_ids


class UnsplicableBypass(CleaningError):
    def __init__(self, issues: List[Dict[str, Any]]) -> None:
        super().__init__(f"{len(issues)} links could not be passed through bypassed nodes")
        self.issues = issues


class EmptyGraph(CleaningError):
    def __init__(self) -> None:
        super().__init__("workflow has no nodes")


class Disconnected(CleaningError):
    def __init__(self, component_count: int) -> None:
        super().__init__(f"workflow has {component_count} connected components")
        self.component_count = component_count


class UnnamedPort(CleaningError):
    pass


@dataclass(frozen=True)
class CleaningOptions:
    drop_note_nodes: bool = True
    splice_reroute: bool = True
    resolve_broadcasters: bool = True
    splice_bypass: bool = True
    require_connected: bool = True
    lenient: bool = True
    note_types: Tuple[str, ...] = NOTE_TYPES
    reroute_types: Tuple[str, ...] = REROUTE_TYPES
    broadcaster_types: Tuple[str, ...] = BROADCASTER_TYPES


@dataclass
class RemovedNode:
    id: int
    type_name: str
    reason: str


@dataclass
class CleaningReport:
    removed_nodes: List[RemovedNode] = field(default_factory=list)
    added_links: int = 0
    spliced_links: int = 0
    issues: List[Dict[str, Any]] = field(default_factory=list)
    rejected: Optional[str] = None

    def to_obj(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Connectivity:
    component_count: int

    @property
    def connected(self) -> bool:
        return self.component_count == 1

    def __str__(self) -> str:
        return "Connected" if self.connected else f"Disconnected({self.component_count})"


class DisjointSet:
    def __init__(self, items: Iterable[int]) -> None:
        self.parent = {item: item for item in items}
        self.rank = {item: 0 for item in self.parent}

    def find(self, x: int) -> int:
        if self.parent[x] != x:
            self.parent[x] = self.find(self.parent[x])
        return self.parent[x]

    def union(self, x: int, y: int) -> bool:
        xroot = self.find(x)
        yroot = self.find(y)
        if xroot == yroot:
            return False
        if self.rank[xroot] < self.rank[yroot]:
            self.parent[xroot] = yroot
        else:
            self.parent[yroot] = xroot
            if self.rank[xroot] == self.rank[yroot]:
                self.rank[xroot] += 1
        return True

    def count(self) -> int:
        return len({self.find(x) for x in self.parent})


class GraphEditor:
    """Mutable working copy of a GraphWorkflow that keeps slot link ids in step with the link table."""

    def __init__(self, g: GraphWorkflow) -> None:
        self.nodes: Dict[int, GraphNode] = {node.id: node for node in g.nodes}
        self.links: Dict[int, GraphLink] = {link.id: link for link in g.links}
        self.extra = dict(g.extra)
        self.next_link_id = max(self.links, default=0) + 1
        self.links_added = False

    def incoming(self, node_id: int) -> List[GraphLink]:
        return [link for link in self.links.values() if link.dst_node_id == node_id]

    def outgoing(self, node_id: int) -> List[GraphLink]:
        return [link for link in self.links.values() if link.src_node_id == node_id]

    def remove_link(self, link_id: int) -> GraphLink:
        link = self.links.pop(link_id)

        src = self.nodes.get(link.src_node_id)
        if src is not None and link.src_slot < len(src.outputs):
            outputs = list(src.outputs)
            slot = outputs[link.src_slot]
            outputs[link.src_slot] = replace(slot, links=tuple(i for i in slot.links if i != link_id))
            self.nodes[src.id] = replace(src, outputs=tuple(outputs))

        dst = self.nodes.get(link.dst_node_id)
        if dst is not None and link.dst_slot < len(dst.inputs):
            inputs = list(dst.inputs)
            if inputs[link.dst_slot].link == link_id:
                inputs[link.dst_slot] = replace(inputs[link.dst_slot], link=None)
                self.nodes[dst.id] = replace(dst, inputs=tuple(inputs))
        return link

    def add_link(
        self, src_id: int, src_slot: int, dst_id: int, dst_slot: int, value_type: str
    ) -> GraphLink:
        link = GraphLink(self.next_link_id, src_id, src_slot, dst_id, dst_slot, value_type)
        self.next_link_id += 1
        self.links[link.id] = link
        self.links_added = True

        src = self.nodes[src_id]
        outputs = list(src.outputs)
        outputs[src_slot] = replace(outputs[src_slot], links=outputs[src_slot].links + (link.id,))
        self.nodes[src_id] = replace(src, outputs=tuple(outputs))

        dst = self.nodes[dst_id]
        inputs = list(dst.inputs)
        inputs[dst_slot] = replace(inputs[dst_slot], link=link.id)
        self.nodes[dst_id] = replace(dst, inputs=tuple(inputs))
        return link

    def remove_node(self, node_id: int) -> GraphNode:
        for link in self.incoming(node_id) + self.outgoing(node_id):
            if link.id in self.links:
                self.remove_link(link.id)
        return self.nodes.pop(node_id)

    def reconnect(self, upstream: GraphLink, downstream: GraphLink) -> GraphLink:
        self.remove_link(downstream.id)
        declared = self.nodes[upstream.src_node_id].outputs[upstream.src_slot].value_type
        if declared in (WILDCARD_TYPE, downstream.value_type):
            value_type = downstream.value_type
        else:
            value_type = declared
        return self.add_link(
            upstream.src_node_id,
            upstream.src_slot,
            downstream.dst_node_id,
            downstream.dst_slot,
            value_type,
        )

    def build(self) -> GraphWorkflow:
        if self.links_added and "last_link_id" in self.extra:
            last = self.extra["last_link_id"]
            if isinstance(last, int):
                self.extra["last_link_id"] = max(last, max(self.links, default=0))
        return GraphWorkflow(tuple(self.nodes.values()), tuple(self.links.values()), self.extra)


def _ids_of_type(editor: GraphEditor, type_names: Iterable[str]) -> List[int]:
    wanted = set(type_names)
    return sorted(node.id for node in editor.nodes.values() if node.type_name in wanted)


def _splice_reroutes(editor: GraphEditor, report: CleaningReport, reroute_types) -> None:
    for node_id in _ids_of_type(editor, reroute_types):
        incoming = editor.incoming(node_id)
        for downstream in editor.outgoing(node_id):
            if incoming:
                editor.reconnect(incoming[0], downstream)
                report.spliced_links += 1
            else:
                editor.remove_link(downstream.id)
                report.issues.append(
                    {"code": "UnsourcedReroute", "node_id": node_id, "link_id": downstream.id}
                )
        node = editor.remove_node(node_id)
        report.removed_nodes.append(RemovedNode(node.id, node.type_name, "reroute"))


def _required_ports(node: GraphNode, base: Optional[NodeBase]) -> List[int]:
    spec = base.lookup(node.type_name) if base is not None else None
    if spec is not None and spec.required_inputs is not None:
        return [slot for slot, o in enumerate(node.inputs) if o.port in spec.required_inputs]
    return [slot for slot, o in enumerate(node.inputs) if not o.is_widget]


def _resolve_broadcasters(
    editor: GraphEditor,
    report: CleaningReport,
    broadcaster_types,
    base: Optional[NodeBase] = None,
    strict: bool = True,
) -> None:
    broadcaster_ids = _ids_of_type(editor, broadcaster_types)
    if not broadcaster_ids:
        return

    offers: Dict[str, List[Tuple[int, GraphLink]]] = {}
    for node_id in broadcaster_ids:
        for link in editor.incoming(node_id):
            value_type = link.value_type
            if value_type == WILDCARD_TYPE:
                value_type = editor.nodes[link.src_node_id].outputs[link.src_slot].value_type
            offers.setdefault(value_type, []).append((node_id, link))

    skip = set(broadcaster_ids)
    for node in sorted(editor.nodes.values(), key=lambda n: n.id):
        if node.id in skip:
            continue
        for slot in _required_ports(node, base):
            node_input = editor.nodes[node.id].inputs[slot]
            if node_input.link is not None or node_input.value_type not in offers:
                continue
            candidates = offers[node_input.value_type]
            if len(candidates) > 1:
                error = AmbiguousBroadcast(node_input.value_type, [c[0] for c in candidates])
                if strict:
                    raise error
                report.rejected = report.rejected or f"AmbiguousBroadcast: {error}"
                continue
            upstream = candidates[0][1]
            editor.add_link(
                upstream.src_node_id, upstream.src_slot, node.id, slot, node_input.value_type
            )
            report.added_links += 1

    for node_id in broadcaster_ids:
        node = editor.remove_node(node_id)
        report.removed_nodes.append(RemovedNode(node.id, node.type_name, "broadcaster"))


def _splice_bypass(editor: GraphEditor, report: CleaningReport) -> None:
    skipped = [node.id for node in editor.nodes.values() if node.mode.skipped]
    for node_id in sorted(skipped):
        incoming = editor.incoming(node_id)
        for downstream in editor.outgoing(node_id):
            matches = [link for link in incoming if link.value_type == downstream.value_type]
            if len(matches) == 1:
                editor.reconnect(matches[0], downstream)
                report.spliced_links += 1
            else:
                editor.remove_link(downstream.id)
                report.issues.append(
                    {
                        "code": "UnsplicableBypass",
                        "node_id": node_id,
                        "link_id": downstream.id,
                        "value_type": downstream.value_type,
                        "candidates": len(matches),
                    }
                )
        node = editor.remove_node(node_id)
        report.removed_nodes.append(RemovedNode(node.id, node.type_name, node.mode.name.lower()))


def _drop_notes(editor: GraphEditor, report: CleaningReport, note_types) -> None:
    for node_id in _ids_of_type(editor, note_types):
        node = editor.remove_node(node_id)
        report.removed_nodes.append(RemovedNode(node.id, node.type_name, "note"))


def resolve_broadcasters(
    g: GraphWorkflow,
    broadcaster_types: Tuple[str, ...] = BROADCASTER_TYPES,
    base: Optional[NodeBase] = None,
    report: Optional[CleaningReport] = None,
) -> GraphWorkflow:
    editor = GraphEditor(g)
    _resolve_broadcasters(editor, report or CleaningReport(), broadcaster_types, base)
    return editor.build()


def splice_bypass(g: GraphWorkflow, report: Optional[CleaningReport] = None) -> GraphWorkflow:
    editor = GraphEditor(g)
    _splice_bypass(editor, report if report is not None else CleaningReport())
    return editor.build()


def check_connected(g: GraphWorkflow) -> Connectivity:
    if not g.nodes:
        raise EmptyGraph()
    components = DisjointSet(node.id for node in g.nodes)
    for link in g.links:
        components.union(link.src_node_id, link.dst_node_id)
    return Connectivity(components.count())


def _reject(report: CleaningReport, error: CleaningError, strict: bool) -> None:
    if strict:
        raise error
    report.rejected = report.rejected or f"{type(error).__name__}: {error}"


def clean(
    g: GraphWorkflow,
    opts: Optional[CleaningOptions] = None,
    base: Optional[NodeBase] = None,
) -> Tuple[GraphWorkflow, CleaningReport]:
    """Run the cleaning pipeline.

    With a NodeBase the cleaned graph is also checked for static executability,
    and broadcasters fill only the inputs the base marks as required.
    """
    opts = opts or CleaningOptions()
    strict = not opts.lenient
    report = CleaningReport()
    editor = GraphEditor(g)

    if opts.splice_reroute:
        _splice_reroutes(editor, report, opts.reroute_types)
    if opts.resolve_broadcasters:
        _resolve_broadcasters(editor, report, opts.broadcaster_types, base, strict)
    if opts.splice_bypass:
        _splice_bypass(editor, report)
        unsplicable = [i for i in report.issues if i["code"] == "UnsplicableBypass"]
        if strict and unsplicable:
            raise UnsplicableBypass(unsplicable)
    if opts.drop_note_nodes:
        _drop_notes(editor, report, opts.note_types)

    cleaned = editor.build()

    if opts.require_connected and report.rejected is None:
        if not cleaned.nodes:
            _reject(report, EmptyGraph(), strict)
        else:
            connectivity = check_connected(cleaned)
            if not connectivity.connected:
                _reject(report, Disconnected(connectivity.component_count), strict)

    if base is not None and report.rejected is None:
        validation = validate_executable(cleaned, base)
        if not validation.valid:
            report.issues.extend(issue.to_obj() for issue in validation.issues)
            codes = sorted({issue.code.value for issue in validation.issues})
            report.rejected = f"NotExecutable: {', '.join(codes)}"

    logger.debug(
        "Cleaned workflow: removed=%d added=%d spliced=%d rejected=%s",
        len(report.removed_nodes),
        report.added_links,
        report.spliced_links,
        report.rejected,
    )
    return cleaned, report


def to_diagram(g: GraphWorkflow) -> WorkflowDiagram:
    linked = {link.src_node_id for link in g.links} | {link.dst_node_id for link in g.links}
    refs = assign_node_refs(node for node in g.nodes if node.id in linked)

    links = []
    for link in sorted(g.links, key=lambda lk: lk.id):
        src = g.nodes_by_id[link.src_node_id]
        dst = g.nodes_by_id[link.dst_node_id]
        out_port = src.outputs[link.src_slot].port
        in_port = dst.inputs[link.dst_slot].port
        if not out_port or not in_port:
            raise UnnamedPort(f"link {link.id} touches a slot without a port name")
        links.append(Link(refs[src.id], out_port, refs[dst.id], in_port))
    return WorkflowDiagram(tuple(links))
