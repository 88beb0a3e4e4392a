"""Hierarchical reporting template and the structured-report value object.

A template is a forest of questions on three levels: level 1 asks about
coarse abnormality existence, level 2 about specific findings, level 3 about
fine-grained attributes. Every level-2/3 question carries a trigger: it is
asked only when a specific option of its parent question was selected.
Templates and reports are immutable after construction and safe to share
across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .errors import ParseError, UnknownIdError, ValidationError
from .textnorm import normalize_phrase

MODE_SINGLE = "single-choice"
MODE_MULTI = "multi-select"
MODES = (MODE_SINGLE, MODE_MULTI)
LEVELS = (1, 2, 3)


def option_id_for(question_id: str, canonical_text: str) -> str:
    """Globally unique option id: the owning question id plus the option text."""
    return f"{question_id}/{canonical_text}"


@dataclass(frozen=True)
class AnswerOption:
    id: str
    canonical_text: str
    question_id: str


@dataclass(frozen=True)
class Question:
    id: str
    level: int
    text: str
    mode: str
    option_ids: tuple[str, ...]
    # (parent question id, parent option id); None for level-1 questions.
    trigger: tuple[str, str] | None = None


@dataclass(frozen=True)
class Template:
    id: str
    questions: tuple[Question, ...]
    options: dict[str, AnswerOption]

    @cached_property
    def questions_by_id(self) -> dict[str, Question]:
        return {q.id: q for q in self.questions}

    @cached_property
    def children_by_question(self) -> dict[str, tuple[Question, ...]]:
        """Child questions grouped by parent question id, in document order."""
        kids: dict[str, list[Question]] = {q.id: [] for q in self.questions}
        for q in self.questions:
            if q.trigger is not None:
                kids[q.trigger[0]].append(q)
        return {qid: tuple(v) for qid, v in kids.items()}

    @cached_property
    def children_by_option(self) -> dict[str, tuple[Question, ...]]:
        """Child questions grouped by the parent option that triggers them."""
        kids: dict[str, list[Question]] = {}
        for q in self.questions:
            if q.trigger is not None:
                kids.setdefault(q.trigger[1], []).append(q)
        return {oid: tuple(v) for oid, v in kids.items()}

    @cached_property
    def label_space(self) -> tuple[str, ...]:
        """All option ids in document order; index = position in logit vectors."""
        out: list[str] = []
        for q in self.questions:
            out.extend(q.option_ids)
        return tuple(out)

    @cached_property
    def option_index(self) -> dict[str, int]:
        return {oid: i for i, oid in enumerate(self.label_space)}

    @property
    def n_answers(self) -> int:
        return len(self.label_space)

    def level_of_option(self, option_id: str) -> int:
        opt = self.options[option_id]
        return self.questions_by_id[opt.question_id].level

    def options_at_level(self, level: int) -> tuple[str, ...]:
        return tuple(
            oid
            for q in self.questions
            if q.level == level
            for oid in q.option_ids
        )


@dataclass(frozen=True)
class StructuredReport:
    """Selected option ids per question. Questions may be absent (unanswered)."""

    study_id: str
    answers: dict[str, frozenset[str]]

    def selected(self, question_id: str) -> frozenset[str]:
        return self.answers.get(question_id, frozenset())


@dataclass(frozen=True)
class ConsistencyViolation:
    question_id: str
    rule: str
    detail: str


def build_template(template_id: str, question_specs: list[dict]) -> Template:
    """Assemble and validate a Template from plain question dictionaries.

    Each spec dict carries: id, level, text, mode, options (list of option
    texts), and optionally trigger {parent_question, parent_option}.
    """
    questions: list[Question] = []
    options: dict[str, AnswerOption] = {}
    seen_q: set[str] = set()

    for spec in question_specs:
        qid = str(spec["id"])
        if qid in seen_q:
            raise ValidationError(f"duplicate question id: {qid}")
        seen_q.add(qid)

        level = spec["level"]
        if level not in LEVELS:
            raise ValidationError(f"question {qid}: level must be in 1..3, got {level!r}")
        mode = spec.get("mode", MODE_MULTI)
        if mode not in MODES:
            raise ValidationError(f"question {qid}: unknown mode {mode!r}")

        texts = [normalize_phrase(str(t)) for t in spec.get("options", [])]
        if not texts:
            raise ValidationError(f"question {qid}: no answer options")
        if any(not t for t in texts):
            raise ValidationError(f"question {qid}: empty option text after normalization")
        if len(set(texts)) != len(texts):
            raise ValidationError(f"question {qid}: duplicate option text")

        oids = []
        for text in texts:
            oid = option_id_for(qid, text)
            if oid in options:
                raise ValidationError(f"duplicate option id: {oid}")
            options[oid] = AnswerOption(id=oid, canonical_text=text, question_id=qid)
            oids.append(oid)

        trigger_spec = spec.get("trigger")
        trigger: tuple[str, str] | None = None
        if trigger_spec is not None:
            trigger = (str(trigger_spec["parent_question"]), str(trigger_spec["parent_option"]))

        questions.append(
            Question(
                id=qid,
                level=level,
                text=str(spec.get("text", "")).strip(),
                mode=mode,
                option_ids=tuple(oids),
                trigger=trigger,
            )
        )

    by_id = {q.id: q for q in questions}
    for q in questions:
        if q.level == 1:
            if q.trigger is not None:
                raise ValidationError(f"question {q.id}: level-1 question must not have a trigger")
            continue
        if q.trigger is None:
            raise ValidationError(f"question {q.id}: level-{q.level} question needs a trigger")
        parent_q, parent_opt = q.trigger
        parent = by_id.get(parent_q)
        if parent is None:
            raise ValidationError(f"question {q.id}: trigger parent {parent_q} does not exist")
        if parent.level != q.level - 1:
            raise ValidationError(
                f"question {q.id}: parent {parent_q} has level {parent.level}, expected {q.level - 1}"
            )
        if parent_opt not in parent.option_ids:
            raise ValidationError(
                f"question {q.id}: trigger option {parent_opt} is not an option of {parent_q}"
            )

    return Template(id=str(template_id), questions=tuple(questions), options=options)


def load_template(document: str | dict) -> Template:
    """Parse a template document (JSON text or an already-decoded dict)."""
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"template document is not valid JSON: {exc}") from exc
    else:
        doc = document
    if not isinstance(doc, dict) or "id" not in doc or "questions" not in doc:
        raise ParseError("template document must be an object with 'id' and 'questions'")
    if not isinstance(doc["questions"], list):
        raise ParseError("'questions' must be a list")
    try:
        return build_template(doc["id"], doc["questions"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed question entry: {exc}") from exc


def template_to_dict(template: Template) -> dict:
    questions = []
    for q in template.questions:
        entry: dict = {
            "id": q.id,
            "level": q.level,
            "text": q.text,
            "mode": q.mode,
            "options": [template.options[oid].canonical_text for oid in q.option_ids],
        }
        if q.trigger is not None:
            entry["trigger"] = {"parent_question": q.trigger[0], "parent_option": q.trigger[1]}
        questions.append(entry)
    return {"id": template.id, "questions": questions}


def serialize_template(template: Template) -> str:
    """Canonical JSON serialization; load_template(serialize_template(t)) == t."""
    return json.dumps(template_to_dict(template), indent=2, sort_keys=True) + "\n"


def read_template(path: str | Path) -> Template:
    return load_template(Path(path).read_text(encoding="utf-8"))


def write_template(template: Template, path: str | Path) -> None:
    Path(path).write_text(serialize_template(template), encoding="utf-8")


def traversal_order(template: Template) -> list[Question]:
    """Depth-first question order: every parent precedes its children, roots
    and sibling children in document order."""
    order: list[Question] = []

    def visit(q: Question) -> None:
        order.append(q)
        for child in template.children_by_question.get(q.id, ()):
            visit(child)

    for q in template.questions:
        if q.level == 1:
            visit(q)
    return order


def check_consistency(report: StructuredReport, template: Template) -> list[ConsistencyViolation]:
    """All structural violations in ``report``; empty list means consistent.

    Raises UnknownIdError when the report references ids missing from the
    template entirely.
    """
    violations: list[ConsistencyViolation] = []
    for qid, selected in report.answers.items():
        question = template.questions_by_id.get(qid)
        if question is None:
            raise UnknownIdError(f"question {qid} not in template {template.id}")
        for oid in selected:
            if oid not in template.options:
                raise UnknownIdError(f"option {oid} not in template {template.id}")
            if oid not in question.option_ids:
                violations.append(
                    ConsistencyViolation(qid, "invalid-option", f"{oid} is not an option of {qid}")
                )
        if question.mode == MODE_SINGLE and len(selected) != 1:
            violations.append(
                ConsistencyViolation(
                    qid, "multiplicity", f"single-choice question has {len(selected)} selections"
                )
            )
        if question.trigger is not None:
            parent_q, parent_opt = question.trigger
            if parent_opt not in report.answers.get(parent_q, frozenset()):
                violations.append(
                    ConsistencyViolation(
                        qid, "gating", f"answered while trigger {parent_q} -> {parent_opt} unmet"
                    )
                )
    return violations


def report_to_dict(report: StructuredReport) -> dict:
    return {
        "study_id": report.study_id,
        "answers": {qid: sorted(opts) for qid, opts in sorted(report.answers.items())},
    }


def report_from_dict(doc: dict) -> StructuredReport:
    try:
        answers = {str(q): frozenset(str(o) for o in opts) for q, opts in doc["answers"].items()}
        return StructuredReport(study_id=str(doc["study_id"]), answers=answers)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed report document: {exc}") from exc


def serialize_report(report: StructuredReport) -> str:
    return json.dumps(report_to_dict(report), sort_keys=True)


def write_reports(reports: list[StructuredReport], path: str | Path) -> None:
    lines = [serialize_report(r) for r in reports]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_reports(path: str | Path) -> list[StructuredReport]:
    reports = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            reports.append(report_from_dict(json.loads(line)))
    return reports
