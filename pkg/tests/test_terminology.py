import pytest
from hypothesis import given, strategies as st

from protoreport.errors import ExpanderUnavailableError, ValidationError
from protoreport.terminology import (
    NullExpander,
    StaticExpander,
    expand_terminology,
    lexicon_from_tsv,
    lexicon_to_tsv,
    normalize_phrase,
    validate_lexicon,
)


class TestNormalizePhrase:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("  Enlarged  Heart.", "enlarged heart"),
            ("cardiomegaly", "cardiomegaly"),
            ("PLEURAL EFFUSION,", "pleural effusion"),
            ("no\teffusion\n", "no effusion"),
            ("opacity...", "opacity"),
        ],
    )
    def test_examples(self, raw, expected):
        assert normalize_phrase(raw) == expected

    @given(st.text(max_size=60))
    def test_idempotent(self, raw):
        once = normalize_phrase(raw)
        assert normalize_phrase(once) == once


class TestExpandTerminology:
    def test_canonical_only_with_null_expander(self, template):
        lexicon = expand_terminology(template, NullExpander())
        assert lexicon.lookup("cardiomegaly") == "l2_cardio/cardiomegaly"
        assert len(lexicon.entries) == template.n_answers
        assert not lexicon.degraded
        validate_lexicon(lexicon, template)

    def test_expansion_adds_variant(self, template):
        expander = StaticExpander({"l2_cardio/cardiomegaly": ["Enlarged Heart"]})
        lexicon = expand_terminology(template, expander)
        assert lexicon.lookup("enlarged heart") == "l2_cardio/cardiomegaly"
        assert lexicon.entries["enlarged heart"].provenance == "manual"

    def test_candidate_equal_to_other_canonical_rejected(self, template):
        expander = StaticExpander({"l2_cardio/cardiomegaly": ["pleural effusion"]})
        lexicon = expand_terminology(template, expander)
        # Oracle: pairwise scan says the phrase already names the other label.
        assert lexicon.lookup("pleural effusion") == "l2_eff/pleural effusion"
        assert lexicon.conflicts, "collision must be logged"

    def test_colliding_expansions_keep_first(self, template):
        expander = StaticExpander(
            {
                "l2_cardio/cardiomegaly": ["big silhouette"],
                "l2_eff/pleural effusion": ["big silhouette"],
            }
        )
        lexicon = expand_terminology(template, expander)
        assert lexicon.lookup("big silhouette") == "l2_cardio/cardiomegaly"
        assert lexicon.conflicts

    def test_provider_failure_degrades(self, template):
        class Boom:
            provenance = "llm-expanded"

            def propose(self, option):
                raise ExpanderUnavailableError("endpoint down")

        lexicon = expand_terminology(template, Boom())
        assert lexicon.degraded
        assert len(lexicon.entries) == template.n_answers
        validate_lexicon(lexicon, template)


class TestLookupInvariants:
    def test_canonical_self_map(self, template):
        lexicon = expand_terminology(template, NullExpander())
        for oid, option in template.options.items():
            assert lexicon.lookup(option.canonical_text) == oid

    def test_lookup_normalization_invariance(self, template):
        lexicon = expand_terminology(
            template, StaticExpander({"l2_cardio/cardiomegaly": ["enlarged heart"]})
        )
        assert lexicon.lookup("Enlarged  HEART") == lexicon.lookup("enlarged heart")

    def test_unseen_phrase_misses(self, template):
        lexicon = expand_terminology(template, NullExpander())
        assert lexicon.lookup("weird phrase") is None


class TestLexiconIO:
    def test_tsv_roundtrip_sorted(self, template):
        lexicon = expand_terminology(
            template, StaticExpander({"l2_cardio/cardiomegaly": ["enlarged heart"]})
        )
        text = lexicon_to_tsv(lexicon)
        lines = text.strip().splitlines()
        assert lines == sorted(lines)
        again = lexicon_from_tsv(text, template)
        assert again.entries == lexicon.entries

    def test_validation_rejects_unknown_target(self, template):
        with pytest.raises(ValidationError):
            lexicon_from_tsv("ghost phrase\tnot/an option\tmanual\n", template)
