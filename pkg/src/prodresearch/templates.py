"""Prompt templates, one file per template id, with ``{name}`` placeholders.

Only the known placeholder names are substituted, so literal JSON braces in
the prompts survive rendering untouched.
"""

from __future__ import annotations

import re
from pathlib import Path

TEMPLATE_IDS = (
    "researcher_system",
    "supervisor_system",
    "plan_eval",
    "toolcall_eval",
    "final_answer_gate",
    "final_report_eval",
    "user_agent_persona",
    "user_agent_rubric",
    "extractor",
    "internalizer",
    "judge_dimension",
)

PLACEHOLDERS = (
    "question",
    "history_str",
    "latte_response",
    "evaluation_criteria",
    "checklist_summary",
    "status_summary",
    "webpage_content",
    "goal",
    "current_date",
    "behavior_history",
    "persona",
    "segment",
    "dimension",
    "criteria",
    "report_a",
    "report_b",
    "s_max",
)
_PLACEHOLDER = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

DEFAULT_DIR = Path(__file__).resolve().parent / "prompts"


class UnboundPlaceholder(KeyError):
    def __init__(self, template_id: str, names: list[str]):
        super().__init__(f"{template_id}: unbound placeholder(s) {', '.join(names)}")
        self.template_id = template_id
        self.names = names


class MissingTemplate(FileNotFoundError):
    pass


class PromptTemplate:
    def __init__(self, template_id: str, text: str):
        self.template_id = template_id
        self.text = text

    @property
    def placeholders(self) -> list[str]:
        return sorted(set(_PLACEHOLDER.findall(self.text)))

    def render(self, **values: object) -> str:
        missing = [name for name in self.placeholders if name not in values]
        if missing:
            raise UnboundPlaceholder(self.template_id, missing)
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.text)


class TemplateSet:
    def __init__(self, directory: str | Path = DEFAULT_DIR):
        self.directory = Path(directory)
        self._templates: dict[str, PromptTemplate] = {}
        for tid in TEMPLATE_IDS:
            path = self.directory / f"{tid}.txt"
            if not path.is_file():
                raise MissingTemplate(f"template {tid!r} not found in {self.directory}")
            self._templates[tid] = PromptTemplate(tid, path.read_text(encoding="utf-8"))

    def __getitem__(self, template_id: str) -> PromptTemplate:
        return self._templates[template_id]

    def render(self, template_id: str, **values: object) -> str:
        return self._templates[template_id].render(**values)
