"""Expanded vocabulary mapping free-text phrase variants to answer options.

The lexicon is an exact-match inverse map: normalized phrase -> option id.
Expansion providers propose candidate variants per option; candidates that
collide with an existing entry for a different option are rejected so the
map stays unambiguous.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import ExpanderUnavailableError, ParseError, ValidationError
from .template import AnswerOption, Template
from .textnorm import normalize_phrase

log = logging.getLogger(__name__)

PROVENANCE_CANONICAL = "canonical"
PROVENANCE_LLM = "llm-expanded"
PROVENANCE_MANUAL = "manual"
PROVENANCES = (PROVENANCE_CANONICAL, PROVENANCE_LLM, PROVENANCE_MANUAL)


@dataclass(frozen=True)
class LexiconEntry:
    option_id: str
    provenance: str


@dataclass
class TerminologyLexicon:
    entries: dict[str, LexiconEntry] = field(default_factory=dict)
    # Set when the expansion provider failed and only canonical entries exist.
    degraded: bool = False
    conflicts: list[str] = field(default_factory=list)

    def lookup(self, phrase: str) -> str | None:
        """Option id for ``phrase`` after normalization, or None."""
        entry = self.entries.get(normalize_phrase(phrase))
        return entry.option_id if entry is not None else None

    def variants_of(self, option_id: str) -> list[str]:
        return [p for p, e in self.entries.items() if e.option_id == option_id]

    def add(self, phrase: str, option_id: str, provenance: str) -> bool:
        """Insert a normalized phrase; reject (returning False) on collision
        with an entry that targets a different option."""
        norm = normalize_phrase(phrase)
        if not norm:
            return False
        existing = self.entries.get(norm)
        if existing is not None:
            if existing.option_id != option_id:
                self.conflicts.append(
                    f"{norm!r}: kept {existing.option_id}, rejected {option_id}"
                )
                log.warning(
                    "lexicon collision: %r already maps to %s, rejecting %s",
                    norm, existing.option_id, option_id,
                )
                return False
            return True
        self.entries[norm] = LexiconEntry(option_id=option_id, provenance=provenance)
        return True


class PhraseExpander(Protocol):
    """Provider proposing phrase variants for one answer option."""

    provenance: str

    def propose(self, option: AnswerOption) -> list[str]: ...


class NullExpander:
    """Proposes nothing; yields a canonical-only lexicon."""

    provenance = PROVENANCE_MANUAL

    def propose(self, option: AnswerOption) -> list[str]:
        return []


class StaticExpander:
    """Variants read from a static mapping of option id -> phrase list."""

    def __init__(self, variants: dict[str, list[str]], provenance: str = PROVENANCE_MANUAL):
        self.variants = variants
        self.provenance = provenance

    @classmethod
    def from_file(cls, path: str | Path) -> "StaticExpander":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"seed-list file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError("seed-list file must map option ids to phrase lists")
        return cls({str(k): [str(p) for p in v] for k, v in doc.items()})

    def propose(self, option: AnswerOption) -> list[str]:
        return list(self.variants.get(option.id, []))


def expand_terminology(template: Template, expander: PhraseExpander) -> TerminologyLexicon:
    """Build the lexicon: canonical texts first, then accepted expansions.

    If the provider fails (ExpanderUnavailableError), the partial expansion
    is discarded and a canonical-only lexicon is returned with the degraded
    flag set.
    """
    lexicon = TerminologyLexicon()
    for oid in template.label_space:
        option = template.options[oid]
        lexicon.add(option.canonical_text, oid, PROVENANCE_CANONICAL)

    try:
        for oid in template.label_space:
            option = template.options[oid]
            for candidate in expander.propose(option):
                lexicon.add(candidate, oid, expander.provenance)
    except ExpanderUnavailableError as exc:
        log.warning("expansion provider failed (%s); degrading to canonical-only lexicon", exc)
        canonical_only = TerminologyLexicon(degraded=True)
        for oid in template.label_space:
            option = template.options[oid]
            canonical_only.add(option.canonical_text, oid, PROVENANCE_CANONICAL)
        return canonical_only
    return lexicon


def validate_lexicon(lexicon: TerminologyLexicon, template: Template) -> None:
    """Referential integrity and canonical self-map checks."""
    for phrase, entry in lexicon.entries.items():
        if entry.option_id not in template.options:
            raise ValidationError(f"lexicon entry {phrase!r} targets unknown option {entry.option_id}")
        if phrase != normalize_phrase(phrase):
            raise ValidationError(f"lexicon phrase {phrase!r} is not normalized")
    for oid, option in template.options.items():
        if lexicon.lookup(option.canonical_text) != oid:
            raise ValidationError(f"canonical text of {oid} does not map back to it")


def lexicon_to_tsv(lexicon: TerminologyLexicon) -> str:
    """Line-oriented serialization, deterministically sorted by phrase."""
    lines = [
        f"{phrase}\t{entry.option_id}\t{entry.provenance}"
        for phrase, entry in sorted(lexicon.entries.items())
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def lexicon_from_tsv(text: str, template: Template | None = None) -> TerminologyLexicon:
    lexicon = TerminologyLexicon()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"lexicon line {lineno}: expected 3 tab-separated fields")
        phrase, option_id, provenance = parts
        if provenance not in PROVENANCES:
            raise ParseError(f"lexicon line {lineno}: unknown provenance {provenance!r}")
        lexicon.entries[normalize_phrase(phrase)] = LexiconEntry(option_id, provenance)
    if template is not None:
        validate_lexicon(lexicon, template)
    return lexicon


def write_lexicon(lexicon: TerminologyLexicon, path: str | Path) -> None:
    Path(path).write_text(lexicon_to_tsv(lexicon), encoding="utf-8")


def read_lexicon(path: str | Path, template: Template | None = None) -> TerminologyLexicon:
    return lexicon_from_tsv(Path(path).read_text(encoding="utf-8"), template)
