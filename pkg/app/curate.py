import logging
import random
from collections import defaultdict
from typing import Any, Callable, Dict, List, Sequence, Tuple, TypeVar

from .category import Category, lookup_category
from .llm import LlmClient, extract_json
from .prompts import TemplateId, render_template
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

R = TypeVar("R")


class CurationError(ComfyFlowError):
    pass


def _reply_field(reply: str, key: str) -> str:
    obj = extract_json(reply)
    if not isinstance(obj, dict) or not isinstance(obj.get(key), str):
        raise CurationError(f'reply lacks a "{key}" string')
    return obj[key].strip()


def enhance_description(raw_information: str, llm: LlmClient) -> str:
    reply = llm.complete(render_template(TemplateId.SEMANTIC_ENHANCEMENT, Infomation=raw_information))
    return _reply_field(reply, "summary")


def summarize_category(description: str, llm: LlmClient) -> str:
    reply = llm.complete(render_template(TemplateId.CATEGORY_SUMMARY, Description=description))
    return _reply_field(reply, "belong_category")


def classify(description: str, llm: LlmClient) -> Category:
    categories = ", ".join(category.display_name for category in Category)
    reply = llm.complete(
        render_template(
            TemplateId.DATA_CLASSIFICATION, Description=description, Categoryies=categories
        )
    )
    answer = _reply_field(reply, "belong_category")
    category = lookup_category(answer)
    if category is None:
        logger.info(f"Unrecognised category {answer!r}, using {Category.OTHER}")
        return Category.OTHER
    return category


def _allocate(sizes: Dict[Any, int], bench_size: int) -> Dict[Any, int]:
    """Largest-remainder apportionment of bench_size over strata; ties go to the earlier key."""
    total = sum(sizes.values())
    quotas = {key: bench_size * size / total for key, size in sizes.items()}
    allocation = {key: int(quota) for key, quota in quotas.items()}
    leftover = bench_size - sum(allocation.values())
    order = sorted(sizes, key=lambda key: -(quotas[key] - allocation[key]))
    for key in order[:leftover]:
        allocation[key] += 1
    return allocation


def partition(
    records: Sequence[R],
    bench_size: int,
    seed: int,
    key: Callable[[R], Any] = lambda record: record.category,
) -> Tuple[List[R], List[R]]:
    if not 0 <= bench_size <= len(records):
        raise CurationError(f"bench_size must be between 0 and {len(records)}")
    if not records:
        return [], []

    strata: Dict[Any, List[int]] = defaultdict(list)
    for i, record in enumerate(records):
        strata[key(record)].append(i)

    allocation = _allocate({k: len(v) for k, v in strata.items()}, bench_size)
    rng = random.Random(seed)
    chosen = set()
    for stratum, indices in strata.items():
        chosen.update(rng.sample(indices, allocation[stratum]))

    bench = [records[i] for i in range(len(records)) if i in chosen]
    train = [records[i] for i in range(len(records)) if i not in chosen]
    return bench, train
