"""Template-aligned label extraction from free-text reports.

Extraction walks the template hierarchically: presence options of a question
are queried only once the question's trigger option has been asserted with
certainty. Each query is constrained: the provider must answer with the
queried canonical text or the literal "unsure"; anything else is coerced to
an uncertain assertion and discarded downstream.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Protocol

from .errors import ExtractorUnavailableError
from .template import (
    MODE_SINGLE,
    StructuredReport,
    Template,
    traversal_order,
)
from .terminology import TerminologyLexicon
from .textnorm import normalize_phrase, tokenize

log = logging.getLogger(__name__)

UNSURE = "unsure"
CERTAIN = "certain"
UNCERTAIN = "uncertain"

DEFAULT_NEGATION_CUES = ("no", "without", "negative for")

_SENTENCE_SPLIT_RE = re.compile(r"[.;\n]")


@dataclass(frozen=True)
class FreeTextStudy:
    study_id: str
    report_text: str
    image_ref: str = ""


@dataclass(frozen=True)
class Assertion:
    question_id: str
    option_id: str
    certainty: str  # CERTAIN | UNCERTAIN


@dataclass(frozen=True)
class ExtractionResult:
    study_id: str
    assertions: tuple[Assertion, ...]

    def certain_options(self) -> set[str]:
        return {a.option_id for a in self.assertions if a.certainty == CERTAIN}


@dataclass(frozen=True)
class ConstrainedQuery:
    prompt: str
    allowed_answers: tuple[str, ...]
    report_excerpt: str


class ConstrainedExtractor(Protocol):
    """Provider answering a ConstrainedQuery with one allowed answer or "unsure"."""

    def answer(self, query: ConstrainedQuery) -> str: ...


def split_sentences(text: str) -> list[str]:
    return [s for s in (_s.strip() for _s in _SENTENCE_SPLIT_RE.split(text)) if s]


def _match_positions(haystack: tuple[str, ...], needle: tuple[str, ...]) -> list[int]:
    """Start indices where token tuple ``needle`` occurs contiguously."""
    if not needle or len(needle) > len(haystack):
        return []
    return [
        i
        for i in range(len(haystack) - len(needle) + 1)
        if haystack[i : i + len(needle)] == needle
    ]


class RuleBasedExtractor:
    """Deterministic extractor: lexicon lookup over sentence-segmented text.

    An answer option is affirmed when one of its variant phrases occurs in a
    sentence with no negation cue starting before the match. Serves as the
    offline oracle for the mining pipeline.
    """

    def __init__(
        self,
        template: Template,
        lexicon: TerminologyLexicon,
        negation_cues: tuple[str, ...] = DEFAULT_NEGATION_CUES,
    ):
        self.template = template
        self.lexicon = lexicon
        self.cue_tokens = tuple(tokenize(c) for c in negation_cues)
        # canonical text -> variant token tuples (pooled across options that
        # share a canonical text; callers map answers back per question).
        self.variants_by_canonical: dict[str, set[tuple[str, ...]]] = {}
        for phrase, entry in lexicon.entries.items():
            option = template.options.get(entry.option_id)
            if option is None:
                continue
            self.variants_by_canonical.setdefault(option.canonical_text, set()).add(
                tokenize(phrase)
            )

    def _affirmed_in(self, sentences: list[tuple[str, ...]], canonical: str) -> bool:
        variants = self.variants_by_canonical.get(canonical, {tokenize(canonical)})
        for tokens in sentences:
            cue_starts = [
                i for cue in self.cue_tokens for i in _match_positions(tokens, cue)
            ]
            first_cue = min(cue_starts) if cue_starts else None
            for variant in variants:
                for start in _match_positions(tokens, variant):
                    if first_cue is None or first_cue >= start:
                        return True
        return False

    def answer(self, query: ConstrainedQuery) -> str:
        sentences = [tokenize(s) for s in split_sentences(query.report_excerpt)]
        affirmed = [
            a
            for a in query.allowed_answers
            if normalize_phrase(a) != UNSURE
            and self._affirmed_in(sentences, normalize_phrase(a))
        ]
        if len(affirmed) == 1:
            return affirmed[0]
        return UNSURE


def presence_prompt(question_text: str, canonical: str) -> str:
    return (
        f"Question: {question_text}\n"
        f"If the report affirms the answer option '{canonical}', reply with exactly "
        f"'{canonical}'. Otherwise reply 'unsure'."
    )


def extract_study(
    study: FreeTextStudy,
    template: Template,
    lexicon: TerminologyLexicon,
    extractor: ConstrainedExtractor,
) -> ExtractionResult:
    """Hierarchical constrained extraction for one study.

    Presence options are queried level by level; a question is queried only
    when its trigger option already holds with certainty, so no attribute
    query is issued under an unsupported parent. Provider failures raise
    ExtractorUnavailableError and the caller decides whether to skip the study.
    """
    assertions: list[Assertion] = []
    certain: dict[str, set[str]] = {}

    for question in traversal_order(template):
        if question.trigger is not None:
            parent_q, parent_opt = question.trigger
            if parent_opt not in certain.get(parent_q, set()):
                continue
        for oid in question.option_ids:
            option = template.options[oid]
            query = ConstrainedQuery(
                prompt=presence_prompt(question.text, option.canonical_text),
                allowed_answers=(option.canonical_text,),
                report_excerpt=study.report_text,
            )
            reply = extractor.answer(query)
            norm = normalize_phrase(reply)
            # A reply may be the canonical text or any lexicon variant of it.
            if norm == option.canonical_text or lexicon.lookup(norm) == oid:
                assertions.append(Assertion(question.id, oid, CERTAIN))
                certain.setdefault(question.id, set()).add(oid)
            elif norm == UNSURE:
                continue
            else:
                log.debug(
                    "study %s: reply %r outside allowed answers for %s; recording uncertain",
                    study.study_id, reply, oid,
                )
                assertions.append(Assertion(question.id, oid, UNCERTAIN))
    return ExtractionResult(study_id=study.study_id, assertions=tuple(assertions))


def filter_extractions(
    result: ExtractionResult,
    template: Template,
    enforce_child_support: bool = True,
) -> ExtractionResult:
    """Noise filtering and hierarchy enforcement; idempotent.

    Drops uncertain assertions, invalid question/option pairings, and
    contradictory single-choice answers; removes assertions whose trigger
    chain is broken; finally removes positive parent assertions whose
    triggered child questions retain no assertions at all (deepest level
    first, so removals cascade upward).
    """
    order = traversal_order(template)

    by_question: dict[str, list[Assertion]] = {}
    for a in result.assertions:
        if a.certainty != CERTAIN:
            continue
        question = template.questions_by_id.get(a.question_id)
        if question is None or a.option_id not in question.option_ids:
            log.debug("study %s: dropping invalid pairing %s/%s",
                      result.study_id, a.question_id, a.option_id)
            continue
        by_question.setdefault(a.question_id, []).append(a)

    for qid, q_assertions in list(by_question.items()):
        question = template.questions_by_id[qid]
        if question.mode == MODE_SINGLE and len(q_assertions) > 1:
            log.debug("study %s: contradictory single-choice assertions at %s; dropping all",
                      result.study_id, qid)
            del by_question[qid]

    kept: dict[str, dict[str, Assertion]] = {}
    for question in order:  # top-down: drop orphaned children
        q_assertions = by_question.get(question.id, [])
        if not q_assertions:
            continue
        if question.trigger is not None:
            parent_q, parent_opt = question.trigger
            if parent_opt not in kept.get(parent_q, {}):
                continue
        kept[question.id] = {a.option_id: a for a in q_assertions}

    if enforce_child_support:
        for question in reversed(order):  # bottom-up: unsupported positives
            q_kept = kept.get(question.id)
            if not q_kept:
                continue
            for oid in list(q_kept):
                children = template.children_by_option.get(oid, ())
                if not children:
                    continue
                if not any(kept.get(child.id) for child in children):
                    del q_kept[oid]
            if not q_kept:
                del kept[question.id]

    ordered: list[Assertion] = []
    for question in order:
        q_kept = kept.get(question.id, {})
        for oid in question.option_ids:
            if oid in q_kept:
                ordered.append(q_kept[oid])
    return ExtractionResult(study_id=result.study_id, assertions=tuple(ordered))


def result_to_report(result: ExtractionResult) -> StructuredReport:
    """Certain assertions viewed as a (possibly partial) structured report."""
    answers: dict[str, set[str]] = {}
    for a in result.assertions:
        if a.certainty == CERTAIN:
            answers.setdefault(a.question_id, set()).add(a.option_id)
    return StructuredReport(
        study_id=result.study_id,
        answers={q: frozenset(v) for q, v in answers.items()},
    )


def build_example_pools(results: Iterable[ExtractionResult]) -> dict[str, list[str]]:
    """Study ids per asserted option, preserving corpus order."""
    pools: dict[str, list[str]] = {}
    for result in results:
        for a in result.assertions:
            if a.certainty != CERTAIN:
                continue
            pool = pools.setdefault(a.option_id, [])
            if result.study_id not in pool:
                pool.append(result.study_id)
    return pools


def mine_corpus(
    studies: Iterable[FreeTextStudy],
    template: Template,
    lexicon: TerminologyLexicon,
    extractor: ConstrainedExtractor,
    enforce_child_support: bool = True,
) -> list[ExtractionResult]:
    """Extract and filter every study; provider failures skip the study."""
    results: list[ExtractionResult] = []
    for study in studies:
        try:
            raw = extract_study(study, template, lexicon, extractor)
        except ExtractorUnavailableError as exc:
            log.warning("skipping study %s: extractor unavailable (%s)", study.study_id, exc)
            continue
        results.append(filter_extractions(raw, template, enforce_child_support))
    return results


def evaluate_extraction(
    predicted: list[ExtractionResult],
    gold: list[StructuredReport],
    template: Template,
) -> dict[int, float]:
    """Per-level macro-F1 of extraction results against gold reports."""
    from .evaluate import macro_f1  # local import: evaluate does not need extraction

    reports = [result_to_report(r) for r in predicted]
    return {level: macro_f1(reports, gold, template, level=level) for level in (1, 2, 3)}
