"""Hierarchical multi-turn report population and the metric suite.

Population walks the template in traversal order, skips questions whose
trigger was not selected, and appends every answered question to the
context of all later ones. Metrics use corpus-wide per-option confusion
counts; questions never asked (gated off) contribute all-negative
predictions, and options with neither gold nor predicted positives are
excluded from macro averages.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .backbone import ImageInput, QuestionContext, render_context
from .bank import PrototypeBank, kb_coverage
from .errors import AlignmentError
from .fusion import Model, forward
from .template import (
    MODE_SINGLE,
    StructuredReport,
    Template,
    traversal_order,
)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decide_answers(
    template: Template,
    question_id: str,
    logits: np.ndarray,
    threshold: float = 0.5,
) -> tuple[str, ...]:
    """Decision rule over one question's options.

    Single-choice: argmax (ties -> lowest option index). Multi-select:
    sigmoid threshold; may select nothing.
    """
    question = template.questions_by_id[question_id]
    idx = [template.option_index[oid] for oid in question.option_ids]
    scores = logits[idx]
    if question.mode == MODE_SINGLE:
        return (question.option_ids[int(np.argmax(scores))],)
    chosen = _sigmoid(scores) > threshold
    return tuple(oid for oid, take in zip(question.option_ids, chosen) if take)


def populate_report(
    image: ImageInput,
    template: Template,
    model: Model,
    bank: PrototypeBank | None,
) -> StructuredReport:
    """Multi-turn template population for one study.

    The output always satisfies check_consistency: children are asked only
    under selected trigger options, and single-choice questions get exactly
    one option. Multi-select questions selecting nothing are left out of the
    report.
    """
    answers: dict[str, frozenset[str]] = {}
    history: list[tuple[str, tuple[str, ...]]] = []
    for question in traversal_order(template):
        if question.trigger is not None:
            parent_q, parent_opt = question.trigger
            if parent_opt not in answers.get(parent_q, frozenset()):
                continue
        context = QuestionContext(
            question_id=question.id,
            history=tuple(history),
            rendered_text=render_context(template, question.id, tuple(history)),
        )
        logits, _ = forward(model, bank, image, context, question)
        selected = decide_answers(template, question.id, logits.values)
        history.append((question.id, selected))
        if selected:
            answers[question.id] = frozenset(selected)
    return StructuredReport(study_id=image.study_id, answers=answers)


def _aligned_pairs(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
) -> list[tuple[StructuredReport, StructuredReport]]:
    pred_by_id = {r.study_id: r for r in predicted}
    gold_by_id = {r.study_id: r for r in gold}
    if len(pred_by_id) != len(predicted) or len(gold_by_id) != len(gold):
        raise AlignmentError("duplicate study ids")
    if set(pred_by_id) != set(gold_by_id):
        missing = set(gold_by_id) ^ set(pred_by_id)
        raise AlignmentError(f"study ids differ between predicted and gold: {sorted(missing)[:5]}")
    return [(pred_by_id[sid], gold_by_id[sid]) for sid in sorted(pred_by_id)]


@dataclass(frozen=True)
class OptionConfusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return (2 * self.tp / denom) if denom else 0.0


def confusion_by_option(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
    template: Template,
) -> dict[str, OptionConfusion]:
    """Corpus-wide confusion counts per answer option.

    An option counts positive for a study when it is among the study's
    selected options; absent questions are all-negative.
    """
    pairs = _aligned_pairs(predicted, gold)
    counts: dict[str, list[int]] = {oid: [0, 0, 0] for oid in template.label_space}
    for pred, gld in pairs:
        pred_pos = {oid for opts in pred.answers.values() for oid in opts}
        gold_pos = {oid for opts in gld.answers.values() for oid in opts}
        for oid in pred_pos | gold_pos:
            if oid not in counts:
                raise AlignmentError(f"option {oid} not in template")
            p, g = oid in pred_pos, oid in gold_pos
            if p and g:
                counts[oid][0] += 1
            elif p:
                counts[oid][1] += 1
            else:
                counts[oid][2] += 1
    return {oid: OptionConfusion(tp, fp, fn) for oid, (tp, fp, fn) in counts.items()}


def macro_f1(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
    template: Template,
    level: int | None = None,
) -> float:
    """Macro-averaged per-option F1 at one level (or across all levels).

    Options with zero gold positives and zero predicted positives are
    excluded; the average over zero included options is vacuously 1.
    """
    confusion = confusion_by_option(predicted, gold, template)
    scores = []
    for oid, c in confusion.items():
        if level is not None and template.level_of_option(oid) != level:
            continue
        if c.tp == 0 and c.fp == 0 and c.fn == 0:
            continue
        scores.append(c.f1)
    return float(np.mean(scores)) if scores else 1.0


def report_accuracy(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
) -> float:
    """Fraction of studies whose reports match gold exactly."""
    pairs = _aligned_pairs(predicted, gold)
    if not pairs:
        return 1.0
    hits = sum(1 for pred, gld in pairs if pred.answers == gld.answers)
    return hits / len(pairs)


@dataclass(frozen=True)
class EvalMetrics:
    overall_f1: float
    l1_f1: float
    l2_f1: float
    l3_f1: float
    report_accuracy: float


def compute_metrics(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
    template: Template,
) -> EvalMetrics:
    return EvalMetrics(
        overall_f1=macro_f1(predicted, gold, template),
        l1_f1=macro_f1(predicted, gold, template, level=1),
        l2_f1=macro_f1(predicted, gold, template, level=2),
        l3_f1=macro_f1(predicted, gold, template, level=3),
        report_accuracy=report_accuracy(predicted, gold),
    )


def included_option_counts(
    predicted: list[StructuredReport],
    gold: list[StructuredReport],
    template: Template,
) -> dict[int, tuple[int, int]]:
    """Per level: (options included in the macro average, total options)."""
    confusion = confusion_by_option(predicted, gold, template)
    out = {}
    for level in (1, 2, 3):
        level_options = template.options_at_level(level)
        included = sum(
            1
            for oid in level_options
            if confusion[oid].tp or confusion[oid].fp or confusion[oid].fn
        )
        out[level] = (included, len(level_options))
    return out


def metrics_report(
    metrics: EvalMetrics,
    option_counts: dict[int, tuple[int, int]],
    bank: PrototypeBank | None = None,
    template: Template | None = None,
) -> str:
    """Structured text report: the five metric fields plus per-level counts."""
    lines = [
        f"overall_f1 {metrics.overall_f1:.6f}",
        f"l1_f1 {metrics.l1_f1:.6f}",
        f"l2_f1 {metrics.l2_f1:.6f}",
        f"l3_f1 {metrics.l3_f1:.6f}",
        f"report_accuracy {metrics.report_accuracy:.6f}",
    ]
    for level in (1, 2, 3):
        included, total = option_counts[level]
        lines.append(f"l{level}_scored_options {included}/{total}")
    if bank is not None and template is not None:
        for level, (covered, total, pct) in kb_coverage(bank, template).items():
            lines.append(f"l{level}_bank_coverage {covered}/{total} ({pct}%)")
    return "\n".join(lines) + "\n"


def metrics_to_json(metrics: EvalMetrics, option_counts: dict[int, tuple[int, int]]) -> str:
    doc = {
        "overall_f1": metrics.overall_f1,
        "l1_f1": metrics.l1_f1,
        "l2_f1": metrics.l2_f1,
        "l3_f1": metrics.l3_f1,
        "report_accuracy": metrics.report_accuracy,
        "scored_options": {
            f"l{level}": {"included": inc, "total": tot}
            for level, (inc, tot) in option_counts.items()
        },
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
