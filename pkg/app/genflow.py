import json
import logging
from dataclasses import dataclass
from typing import AbstractSet, Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .category import Category, lookup_category
from .ir import (
    SchemaViolation,
    WorkflowDiagram,
    check_structure,
    diagram_from_obj,
    diagram_to_obj,
    emit_diagram,
    load_json,
)
from .llm import LlmFailure, NoJsonFound, extract_json
from .nodebase import Embedding, EmbeddingProvider, NodeBase, similarity
from .prompts import TemplateId, render_template
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

DESCRIPTION_MARKER = "create a new diagram based on a new description. Description: "
NOTES_MARKER = " Notes:"
DEFAULT_EXAMPLE_COUNT = len(Category)


class GenflowError(ComfyFlowError):
    pass


class InvalidRequest(GenflowError):
    pass


class FictitiousNodes(GenflowError):
    def __init__(self, names: Sequence[str]) -> None:
        super().__init__(f"nodes not in the node database: {', '.join(names)}")
        self.names = list(names)


class GenerationBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


Example = Tuple[str, WorkflowDiagram]


@dataclass(frozen=True)
class GenerationRequest:
    description: str
    few_shot_examples: Tuple[Example, ...] = ()
    max_attempts: int = 3

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise InvalidRequest("description must not be empty")
        if self.max_attempts < 1:
            raise InvalidRequest("max_attempts must be at least 1")
        object.__setattr__(self, "few_shot_examples", tuple(self.few_shot_examples))


@dataclass(frozen=True)
class GroupRewards:
    rewards: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if not self.rewards:
            raise ValueError("a reward group needs at least one member")
        if any(r not in (0.0, 1.0) for r in self.rewards):
            raise ValueError("rewards must be 0 or 1")

    @property
    def group_size(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class AdvantageSet:
    advantages: Tuple[float, ...]


@dataclass(frozen=True)
class Ok:
    diagram: WorkflowDiagram
    attempts_used: int


@dataclass(frozen=True)
class Failed:
    error: Exception


GenerationOutcome = Union[Ok, Failed]


# ── Reward and advantages ─────────────────────────────────────────────────────


def missing_names(d: WorkflowDiagram, valid_names: AbstractSet[str]) -> List[str]:
    return sorted(name for name in d.type_names() if name not in valid_names)


def reward(d: WorkflowDiagram, valid_names: AbstractSet[str]) -> float:
    """1.0 when every node type is a known node, else 0.0. Empty diagrams score 1.0."""
    return 0.0 if missing_names(d, valid_names) else 1.0


def advantages(r: GroupRewards) -> AdvantageSet:
    """Group-normalised rewards with population std; a zero-variance group maps to zeros."""
    rewards = np.asarray(r.rewards, dtype=np.float64)
    std = rewards.std()
    if std == 0:
        return AdvantageSet(tuple(0.0 for _ in r.rewards))
    return AdvantageSet(tuple(float(a) for a in (rewards - rewards.mean()) / std))


def score_group(
    diagrams: Sequence[WorkflowDiagram], valid_names: AbstractSet[str]
) -> Tuple[GroupRewards, AdvantageSet]:
    rewards = GroupRewards(tuple(reward(d, valid_names) for d in diagrams))
    return rewards, advantages(rewards)


# ── Prompting and parsing ─────────────────────────────────────────────────────


def format_examples(examples: Sequence[Example]) -> str:
    return "\n".join(
        f"Description: {desc} Diagram: {emit_diagram(d).decode('utf-8')}" for desc, d in examples
    )


def build_fewshot_prompt(req: GenerationRequest) -> str:
    return render_template(
        TemplateId.FEW_SHOT,
        Examples=format_examples(req.few_shot_examples),
        Description=req.description,
    )


def description_from_prompt(prompt: str) -> str:
    start = prompt.find(DESCRIPTION_MARKER)
    if start < 0:
        return prompt
    start += len(DESCRIPTION_MARKER)
    end = prompt.rfind(NOTES_MARKER)
    return prompt[start:end] if end >= start else prompt[start:]


def parse_generation(text: str) -> WorkflowDiagram:
    obj = extract_json(text)
    if isinstance(obj, dict) and "diagram" in obj:
        obj = obj["diagram"]
    if not isinstance(obj, list):
        raise NoJsonFound()
    return diagram_from_obj(obj)


def _one_line(error: Exception) -> str:
    return " ".join(f"{type(error).__name__}: {error}".split())


def generate(req: GenerationRequest, backend: GenerationBackend, base: NodeBase) -> GenerationOutcome:
    """Prompt, parse and check; on failure re-prompt with the reply and the error appended."""
    prompt = build_fewshot_prompt(req)
    current = prompt
    last_error: Exception = GenflowError("no attempt made")

    for attempt in range(1, req.max_attempts + 1):
        try:
            reply = backend.complete(current)
        except LlmFailure as e:
            logger.warning(f"Generation attempt {attempt}: {e}")
            last_error = e
            continue

        try:
            d = parse_generation(reply)
            check_structure(d)
            missing = missing_names(d, base.names)
            if missing:
                raise FictitiousNodes(missing)
        except ComfyFlowError as e:
            logger.info(f"Generation attempt {attempt} rejected: {_one_line(e)}")
            last_error = e
            current = f"{prompt}\nPrevious reply:\n{reply}\nError: {_one_line(e)}"
            continue

        return Ok(d, attempt)

    return Failed(last_error)


# ── Few-shot corpus and the nearest-neighbour backend ─────────────────────────


@dataclass(frozen=True)
class FewShotRecord:
    description: str
    diagram: WorkflowDiagram
    category: Optional[Category] = None

    @property
    def example(self) -> Example:
        return self.description, self.diagram

    def to_obj(self) -> Dict[str, Any]:
        obj: Dict[str, Any] = {
            "description": self.description,
            "diagram": diagram_to_obj(self.diagram),
        }
        if self.category is not None:
            obj["category"] = self.category.value
        return obj


def load_fewshot(data: Union[bytes, str]) -> List[FewShotRecord]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        obj = load_json(line)
        if not isinstance(obj, dict) or not isinstance(obj.get("description"), str):
            raise SchemaViolation(f"line {line_no}", "expected an object with a description")
        try:
            d = diagram_from_obj(obj.get("diagram"))
        except SchemaViolation as e:
            raise SchemaViolation(f"line {line_no}{e.path}", str(e)) from e
        records.append(FewShotRecord(obj["description"], d, lookup_category(obj.get("category"))))
    return records


def select_examples(corpus: Sequence[FewShotRecord], per_category: int = 1) -> List[Example]:
    if not any(record.category is not None for record in corpus):
        return [record.example for record in corpus[:DEFAULT_EXAMPLE_COUNT]]

    taken: Dict[Category, int] = {}
    examples = []
    for record in corpus:
        if record.category is None or taken.get(record.category, 0) >= per_category:
            continue
        taken[record.category] = taken.get(record.category, 0) + 1
        examples.append(record.example)
    return examples


class NearestNeighborBackend:
    def __init__(self, corpus: Sequence[FewShotRecord], provider: EmbeddingProvider) -> None:
        if not corpus:
            raise GenflowError("nearest-neighbour backend needs a non-empty corpus")
        self.corpus = list(corpus)
        self.provider = provider
        self.embeddings: List[Embedding] = [provider.embed(r.description) for r in self.corpus]

    def nearest(self, description: str) -> FewShotRecord:
        query = self.provider.embed(description)
        scores = [similarity(query, embedding) for embedding in self.embeddings]
        # first maximum wins ties
        return self.corpus[int(np.argmax(scores))]

    def complete(self, prompt: str) -> str:
        record = self.nearest(description_from_prompt(prompt))
        return json.dumps({"diagram": diagram_to_obj(record.diagram)}, ensure_ascii=False)
