import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .ir import DuplicateInputSlot, Link, NodeRef, NonDenseOrdinals, WorkflowDiagram, emit_diagram
from .llm import LlmClient, LlmFailure, extract_json
from .nodebase import EmbeddingProvider, NodeBase, NodeSpec, top_k
from .prompts import PromptTemplate, TemplateId, get_template, render
from .util import ComfyFlowError, log, with_app_context

logger = logging.getLogger(__name__)


class RefineError(ComfyFlowError):
    pass


class ParseFailure(RefineError):
    pass


class NotInCandidates(RefineError):
    def __init__(self, chosen: str, candidates: Sequence[str]) -> None:
        super().__init__(f"{chosen!r} is not one of {list(candidates)}")
        self.chosen = chosen


class PortMismatch(RefineError):
    pass


@dataclass
class RefineOutcome:
    replacements: List[Tuple[str, str]] = field(default_factory=list)
    unresolved: List[Tuple[str, str]] = field(default_factory=list)
    diagram: WorkflowDiagram = field(default_factory=WorkflowDiagram)
    truncated: List[str] = field(default_factory=list)

    def to_obj(self) -> Dict[str, Any]:
        return {
            "replacements": [list(r) for r in self.replacements],
            "unresolved": [list(u) for u in self.unresolved],
            "truncated": list(self.truncated),
        }


def detect_incorrect(d: WorkflowDiagram, base: NodeBase) -> List[str]:
    return sorted({ref.type_name for ref in d.node_refs() if ref.type_name not in base})


def _candidate_listing(specs: Sequence[NodeSpec]) -> str:
    return json.dumps(
        [
            {
                "node_name": spec.node_name,
                "input_names": list(spec.input_names),
                "output_names": list(spec.output_names),
            }
            for spec in specs
        ],
        ensure_ascii=False,
    )


def _touching_links(d: WorkflowDiagram, type_name: str) -> str:
    links = [
        link.to_list()
        for link in d.links
        if type_name in (link.out_node.type_name, link.in_node.type_name)
    ]
    return json.dumps(links, ensure_ascii=False, separators=(",", ":"))


def build_prompt(
    d: WorkflowDiagram,
    desc: str,
    name: str,
    candidates: Sequence[NodeSpec],
    max_prompt_chars: Optional[int] = None,
    template: Optional[PromptTemplate] = None,
) -> Tuple[str, bool]:
    template = template or get_template(TemplateId.REFINE_SELECT)
    bindings = {
        "Description": desc,
        "Diagram": emit_diagram(d).decode("utf-8"),
        "Name": name,
        "Nodes": _candidate_listing(candidates),
    }
    prompt = render(template, bindings)
    if max_prompt_chars is None or len(prompt) <= max_prompt_chars:
        return prompt, False

    bindings["Diagram"] = _touching_links(d, name)
    return render(template, bindings), True


def parse_choice(reply: str) -> str:
    try:
        obj = extract_json(reply)
    except ComfyFlowError as e:
        raise ParseFailure(str(e)) from e
    if not isinstance(obj, dict) or not isinstance(obj.get("candidate_node_name"), str):
        raise ParseFailure('reply lacks a "candidate_node_name" string')
    return obj["candidate_node_name"].strip()


@dataclass
class _Selection:
    name: str
    chosen: Optional[str] = None
    reason: Optional[str] = None
    truncated: bool = False


def _select(
    d: WorkflowDiagram,
    desc: str,
    name: str,
    base: NodeBase,
    llm: LlmClient,
    k: int,
    provider: Optional[EmbeddingProvider],
    retries: int,
    max_prompt_chars: Optional[int],
    template: PromptTemplate,
) -> _Selection:
    ranked = top_k(base, name, k, provider)
    candidates = [base.specs[candidate] for candidate, _ in ranked]
    prompt, truncated = build_prompt(d, desc, name, candidates, max_prompt_chars, template)
    selection = _Selection(name, truncated=truncated)

    reply = None
    for attempt in range(1 + retries):
        try:
            reply = llm.complete(prompt)
            break
        except LlmFailure as e:
            logger.warning(f"Refine {name}: LLM failure (attempt {attempt + 1}): {e}")
    if reply is None:
        selection.reason = LlmFailure.__name__
        return selection

    log("refine", name, "reply", reply, filename="refine.txt")
    try:
        chosen = parse_choice(reply)
        if chosen not in [spec.node_name for spec in candidates]:
            raise NotInCandidates(chosen, [spec.node_name for spec in candidates])
    except RefineError as e:
        logger.info(f"Refine {name}: {type(e).__name__}: {e}")
        selection.reason = type(e).__name__
        return selection

    selection.chosen = chosen
    return selection


def _unique(matches: List[str]) -> Optional[str]:
    return matches[0] if len(matches) == 1 else None


def _remap_port(
    port: str,
    names: Sequence[str],
    types: Optional[Sequence[str]],
    wanted_type: Optional[str],
) -> str:
    if port in names:
        return port
    found = _unique([name for name in names if name.casefold() == port.casefold()])
    if found is None and types is not None and wanted_type is not None:
        found = _unique([name for name, t in zip(names, types) if t == wanted_type])
    if found is None:
        raise PortMismatch(f"port {port!r} has no counterpart in {list(names)}")
    return found


def rewrite(d: WorkflowDiagram, old: str, spec: NodeSpec, base: NodeBase) -> WorkflowDiagram:
    """Rename every `old` node to spec.node_name, keeping ordinals and re-mapping ports.

    Ordinals are shifted past nodes of the new type already in the diagram.
    """
    new = spec.node_name
    shift = sum(1 for ref in d.node_refs() if ref.type_name == new)

    def renamed(ref: NodeRef) -> NodeRef:
        return NodeRef(new, ref.ordinal + shift) if ref.type_name == old else ref

    def other_spec(ref: NodeRef) -> Optional[NodeSpec]:
        return None if ref.type_name == old else base.lookup(ref.type_name)

    links = []
    for link in d.links:
        out_port, in_port = link.out_port, link.in_port
        if link.out_node.type_name == old:
            peer = other_spec(link.in_node)
            out_port = _remap_port(
                out_port,
                spec.output_names,
                spec.output_types,
                peer.input_type(in_port) if peer is not None else None,
            )
        if link.in_node.type_name == old:
            peer = other_spec(link.out_node)
            in_port = _remap_port(
                in_port,
                spec.input_names,
                spec.input_types,
                peer.output_type(link.out_port) if peer is not None else None,
            )
        links.append(Link(renamed(link.out_node), out_port, renamed(link.in_node), in_port))

    try:
        return WorkflowDiagram(tuple(links))
    except (DuplicateInputSlot, NonDenseOrdinals) as e:
        raise PortMismatch(str(e)) from e


def refine(
    d: WorkflowDiagram,
    desc: str,
    base: NodeBase,
    llm: LlmClient,
    k: int = 5,
    provider: Optional[EmbeddingProvider] = None,
    retries: int = 2,
    max_prompt_chars: Optional[int] = None,
    parallelism: int = 1,
) -> RefineOutcome:
    if k < 1:
        raise ValueError("k must be at least 1")

    incorrect = detect_incorrect(d, base)
    outcome = RefineOutcome(diagram=d)
    if not incorrect:
        return outcome

    template = get_template(TemplateId.REFINE_SELECT)

    def select(name: str) -> _Selection:
        return _select(d, desc, name, base, llm, k, provider, retries, max_prompt_chars, template)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as executor:
        selections = list(executor.map(with_app_context(select), incorrect))

    # rewrites apply in sorted name order
    for selection in selections:
        if selection.truncated:
            outcome.truncated.append(selection.name)
        if selection.chosen is None:
            outcome.unresolved.append((selection.name, selection.reason or "Unresolved"))
            continue
        try:
            outcome.diagram = rewrite(outcome.diagram, selection.name, base.specs[selection.chosen], base)
        except PortMismatch as e:
            logger.info(f"Refine {selection.name} -> {selection.chosen}: {e}")
            outcome.unresolved.append((selection.name, PortMismatch.__name__))
            continue
        outcome.replacements.append((selection.name, selection.chosen))

    logger.info(
        f"Refined diagram: replaced={len(outcome.replacements)} unresolved={len(outcome.unresolved)}"
    )
    return outcome
