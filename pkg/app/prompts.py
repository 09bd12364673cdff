"""Prompt templates with ``{{Slot}}`` placeholders.

Slot names are kept exactly as they appear in the templates, including the
spellings ``Infomation`` and ``Categoryies``.
"""

import functools
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

from flask import current_app, has_app_context

from .constants import TEMPLATE_DIRNAME
from .util import ComfyFlowError

SLOT_RE = re.compile(r"\{\{(\w+)\}\}")

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), TEMPLATE_DIRNAME)


class PromptError(ComfyFlowError):
    pass


class MissingSlot(PromptError):
    def __init__(self, name: str) -> None:
        super().__init__(f"no binding for slot {name!r}")
        self.name = name


class UnknownSlot(PromptError):
    def __init__(self, name: str) -> None:
        super().__init__(f"template has no slot {name!r}")
        self.name = name


class TemplateId(Enum):
    SEMANTIC_ENHANCEMENT = "SemanticEnhancement"
    CATEGORY_SUMMARY = "CategorySummary"
    DATA_CLASSIFICATION = "DataClassification"
    FEW_SHOT = "FewShot"
    REFINE_SELECT = "RefineSelect"
    PIA_JUDGE = "PiaJudge"


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    body: str
    slots: Tuple[str, ...]

    @classmethod
    def from_body(cls, template_id: TemplateId, body: str) -> "PromptTemplate":
        return cls(template_id, body, tuple(dict.fromkeys(SLOT_RE.findall(body))))


def render(t: PromptTemplate, bindings: Mapping[str, str]) -> str:
    for name in bindings:
        if name not in t.slots:
            raise UnknownSlot(name)
    for name in t.slots:
        if name not in bindings:
            raise MissingSlot(name)
    # single pass, so bound values containing {{...}} are left alone
    return SLOT_RE.sub(lambda m: bindings[m.group(1)], t.body)


def _read_body(path: str) -> str:
    with open(path, encoding="utf-8") as f:
        body = f.read()
    return body[:-1] if body.endswith("\n") else body


@functools.lru_cache(maxsize=8)
def load_templates(override_dir: Optional[str] = None) -> Dict[TemplateId, PromptTemplate]:
    templates = {}
    for template_id in TemplateId:
        filename = f"{template_id.value}.txt"
        path = os.path.join(TEMPLATE_DIR, filename)
        if override_dir and os.path.isfile(os.path.join(override_dir, filename)):
            path = os.path.join(override_dir, filename)
        templates[template_id] = PromptTemplate.from_body(template_id, _read_body(path))
    return templates


def get_template(template_id: TemplateId) -> PromptTemplate:
    override_dir = current_app.config.get("PROMPT_DIR") if has_app_context() else None
    return load_templates(override_dir or None)[template_id]


def render_template(template_id: TemplateId, **bindings: str) -> str:
    return render(get_template(template_id), bindings)
