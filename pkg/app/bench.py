import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .category import Category, Subcategory
from .comfy_server import ServerClient
from .executor import Rejected, lift, submit, validate_executable
from .genflow import (
    Example,
    Failed,
    GenerationBackend,
    GenerationRequest,
    GroupRewards,
    advantages,
    build_fewshot_prompt,
    generate,
    parse_generation,
    reward,
)
from .ir import GraphWorkflow, WorkflowDiagram, check_structure, graph_workflow_from_obj, load_json
from .llm import LlmClient, LlmFailure
from .nodebase import NodeBase
from .prompts import TemplateId, render_template
from .util import ComfyFlowError, with_app_context

logger = logging.getLogger(__name__)

JUDGE_ANSWER_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)

STAGE_FV = "fv"
STAGE_PA = "pa"
STAGE_PIA = "pia"


class BenchError(ComfyFlowError):
    pass


class EmptyDataset(BenchError):
    def __init__(self) -> None:
        super().__init__("dataset has no valid records")


class MalformedRecord(BenchError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class JudgeUnclear(BenchError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    description: str
    category: Category
    reference_workflow: Optional[GraphWorkflow] = None
    subcategory: Optional[Subcategory] = None

    def __post_init__(self) -> None:
        if self.subcategory is not None and self.category != Category.IMAGE_EDITING:
            raise ValueError("subcategory is only allowed for Image Editing records")


def _percent(count: Optional[int], total: int) -> Optional[float]:
    if count is None or total == 0:
        return None
    return round(count / total * 100, 1)


@dataclass
class CategoryStats:
    total: int = 0
    fv: int = 0
    pa: int = 0
    pia: Optional[int] = None
    pnd: int = 0

    def to_obj(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "fv": _percent(self.fv, self.total),
            "pa": _percent(self.pa, self.total),
            "pia": _percent(self.pia, self.total),
            "pnd": self.pnd,
            "counts": {"fv": self.fv, "pa": self.pa, "pia": self.pia},
        }

    @classmethod
    def from_obj(cls, obj: Dict[str, Any]) -> "CategoryStats":
        counts = obj["counts"]
        return cls(obj["total"], counts["fv"], counts["pa"], counts["pia"], obj["pnd"])


@dataclass
class BenchReport:
    total: int
    fv_count: int
    pa_count: int
    pia_count: Optional[int]
    node_types: List[str] = field(default_factory=list)
    per_category: Dict[str, CategoryStats] = field(default_factory=dict)
    failures: List[Tuple[int, str, str]] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    advantages: List[float] = field(default_factory=list)

    @property
    def fv(self) -> float:
        return self.fv_count / self.total

    @property
    def pa(self) -> float:
        return self.pa_count / self.total

    @property
    def pia(self) -> Optional[float]:
        return None if self.pia_count is None else self.pia_count / self.total

    @property
    def pnd(self) -> int:
        return len(self.node_types)


@dataclass
class RecordResult:
    index: int
    category: Category
    fv: bool = False
    pa: bool = False
    pia: bool = False
    node_types: Tuple[str, ...] = ()
    reward: float = 0.0
    failure: Optional[Tuple[str, str]] = None


def _error_text(error: Exception) -> str:
    return " ".join(f"{type(error).__name__}: {error}".split())


# ── Dataset ───────────────────────────────────────────────────────────────────


def _record_from_obj(obj: Any) -> BenchRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be an object")
    description = obj.get("description")
    if not isinstance(description, str) or not description.strip():
        raise ValueError("description must be a non-empty string")
    if not isinstance(obj.get("category"), str):
        raise ValueError("category must be a string")
    category = Category.parse(obj["category"])
    subcategory = None
    if obj.get("subcategory") is not None:
        subcategory = Subcategory.parse(str(obj["subcategory"]))
    workflow = None
    if obj.get("workflow") is not None:
        workflow = graph_workflow_from_obj(obj["workflow"], "/workflow")
    return BenchRecord(description, category, workflow, subcategory)


def load_dataset(data: Union[bytes, str]) -> Tuple[List[BenchRecord], List[MalformedRecord]]:
    try:
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    except UnicodeDecodeError as e:
        raise EmptyDataset() from e

    records = []
    malformed = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(_record_from_obj(load_json(line)))
        except (ComfyFlowError, ValueError) as e:
            logger.warning(f"Dataset line {line_no} skipped: {e}")
            malformed.append(MalformedRecord(line_no, str(e)))

    if not records:
        raise EmptyDataset()
    return records, malformed


# ── Evaluation ────────────────────────────────────────────────────────────────


def judge_says_yes(reply: str) -> bool:
    match = JUDGE_ANSWER_RE.search(reply)
    if match is None:
        raise JudgeUnclear(f"no yes/no in judge reply {reply[:80]!r}")
    return match.group(1).casefold() == "yes"


def _generate_once(req: GenerationRequest, backend: GenerationBackend) -> WorkflowDiagram:
    d = parse_generation(backend.complete(build_fewshot_prompt(req)))
    check_structure(d)
    return d


def _evaluate_record(
    index: int,
    record: BenchRecord,
    backend: GenerationBackend,
    base: NodeBase,
    judge: Optional[LlmClient],
    server: Optional[ServerClient],
    few_shot: Sequence[Example],
    self_correct: bool,
    max_attempts: int,
) -> RecordResult:
    result = RecordResult(index, record.category)
    req = GenerationRequest(record.description, tuple(few_shot), max_attempts)

    try:
        if self_correct:
            outcome = generate(req, backend, base)
            if isinstance(outcome, Failed):
                raise outcome.error
            d = outcome.diagram
        else:
            d = _generate_once(req, backend)
    except ComfyFlowError as e:
        result.failure = (STAGE_FV, _error_text(e))
        return result
    result.fv = True
    result.reward = reward(d, base.names)

    try:
        g = lift(d, base)
        report = validate_executable(g, base)
        if not report.valid:
            codes = sorted({issue.code.value for issue in report.issues})
            raise BenchError(f"not executable: {', '.join(codes)}")
        if server is not None:
            submitted = submit(g, server, base)
            if isinstance(submitted, Rejected):
                raise BenchError(f"server rejected prompt: {submitted.message[:200]}")
    except ComfyFlowError as e:
        result.failure = (STAGE_PA, _error_text(e))
        return result
    result.pa = True
    result.node_types = tuple(d.type_names())

    if judge is not None:
        prompt = render_template(
            TemplateId.PIA_JUDGE,
            Description=record.description,
            Nodes=json.dumps(d.type_names(), ensure_ascii=False),
        )
        try:
            result.pia = judge_says_yes(judge.complete(prompt))
            if not result.pia:
                result.failure = (STAGE_PIA, "judge answered no")
        except (LlmFailure, JudgeUnclear) as e:
            result.failure = (STAGE_PIA, _error_text(e))
    return result


def merge_results(results: Sequence[RecordResult], judged: bool) -> BenchReport:
    results = sorted(results, key=lambda r: r.index)
    node_types = set()
    per_category: Dict[str, CategoryStats] = {}
    category_types: Dict[str, set] = {}

    for result in results:
        key = result.category.value
        stats = per_category.setdefault(key, CategoryStats(pia=0 if judged else None))
        stats.total += 1
        stats.fv += result.fv
        stats.pa += result.pa
        if judged:
            stats.pia = (stats.pia or 0) + result.pia
        if result.pa:
            node_types.update(result.node_types)
            category_types.setdefault(key, set()).update(result.node_types)
    for key, stats in per_category.items():
        stats.pnd = len(category_types.get(key, ()))

    rewards = [result.reward for result in results]
    return BenchReport(
        total=len(results),
        fv_count=sum(r.fv for r in results),
        pa_count=sum(r.pa for r in results),
        pia_count=sum(r.pia for r in results) if judged else None,
        node_types=sorted(node_types),
        per_category={key: per_category[key] for key in sorted(per_category)},
        failures=[(r.index, r.failure[0], r.failure[1]) for r in results if r.failure],
        rewards=rewards,
        advantages=list(advantages(GroupRewards(tuple(rewards))).advantages),
    )


def evaluate(
    records: Sequence[BenchRecord],
    backend: GenerationBackend,
    base: NodeBase,
    judge: Optional[LlmClient] = None,
    server: Optional[ServerClient] = None,
    few_shot: Sequence[Example] = (),
    parallelism: int = 8,
    self_correct: bool = False,
    max_attempts: int = 3,
) -> BenchReport:
    if not records:
        raise EmptyDataset()

    def run(item: Tuple[int, BenchRecord]) -> RecordResult:
        index, record = item
        return _evaluate_record(
            index, record, backend, base, judge, server, few_shot, self_correct, max_attempts
        )

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as executor:
        results = list(executor.map(with_app_context(run), enumerate(records)))

    report = merge_results(results, judged=judge is not None)
    logger.info(
        f"Bench: total={report.total} fv={report.fv_count} pa={report.pa_count} "
        f"pia={report.pia_count} pnd={report.pnd}"
    )
    return report


# ── Report serialization ──────────────────────────────────────────────────────


def report_to_obj(rep: BenchReport) -> Dict[str, Any]:
    return {
        "total": rep.total,
        "fv": _percent(rep.fv_count, rep.total),
        "pa": _percent(rep.pa_count, rep.total),
        "pia": _percent(rep.pia_count, rep.total),
        "pnd": rep.pnd,
        "counts": {"fv": rep.fv_count, "pa": rep.pa_count, "pia": rep.pia_count},
        "node_types": list(rep.node_types),
        "per_category": {key: stats.to_obj() for key, stats in rep.per_category.items()},
        "failures": [
            {"index": index, "stage": stage, "error": error} for index, stage, error in rep.failures
        ],
        "rewards": list(rep.rewards),
        "advantages": list(rep.advantages),
    }


def report_emit(rep: BenchReport) -> bytes:
    return json.dumps(report_to_obj(rep), ensure_ascii=False, indent=2).encode("utf-8")


def report_parse(data: Union[bytes, str]) -> BenchReport:
    obj = load_json(data)
    try:
        counts = obj["counts"]
        return BenchReport(
            total=obj["total"],
            fv_count=counts["fv"],
            pa_count=counts["pa"],
            pia_count=counts["pia"],
            node_types=list(obj["node_types"]),
            per_category={
                key: CategoryStats.from_obj(stats) for key, stats in obj["per_category"].items()
            },
            failures=[(f["index"], f["stage"], f["error"]) for f in obj["failures"]],
            rewards=list(obj["rewards"]),
            advantages=list(obj["advantages"]),
        )
    except (KeyError, TypeError) as e:
        raise BenchError(f"not a bench report: {e}") from e
