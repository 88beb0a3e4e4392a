import numpy as np
import pytest

from protoreport.backbone import (
    BackboneParams,
    FusedRepresentation,
    ModelDims,
    backward_base,
    classify,
    encode_image,
    encode_text,
    flatten_image_encoder,
    forward_base,
    fuse_features,
    init_backbone,
    make_question_context,
    render_context,
    set_image_encoder,
    token_histogram,
    zero_backbone,
)
from protoreport.errors import DimensionMismatchError, ValidationError
from protoreport.gradcheck import finite_difference_gradients, max_relative_error


class TestEncoders:
    def test_zero_input_zero_init(self, small_dims):
        params = zero_backbone(small_dims)
        out = encode_image(params, np.zeros(small_dims.feature_dim))
        np.testing.assert_array_equal(out, np.zeros(small_dims.image_dim))

    def test_identity_weights_hand_value(self):
        dims = ModelDims(
            feature_dim=2, image_dim=2, text_buckets=4, text_dim=2,
            fused_dim=2, proj_dim=2, hidden_dim=2, n_answers=2,
        )
        params = zero_backbone(dims)
        params.w_img[:] = np.eye(2)
        out = encode_image(params, np.array([1.0, 2.0]))
        # Oracle: hand evaluation of the toy map, activation(x) = tanh(x).
        np.testing.assert_allclose(out, np.tanh([1.0, 2.0]), rtol=0, atol=0)

    def test_deterministic(self, small_dims, rng):
        params = init_backbone(small_dims, rng)
        x = np.arange(small_dims.feature_dim, dtype=float)
        np.testing.assert_array_equal(encode_image(params, x), encode_image(params, x))

    def test_dimension_mismatch(self, small_dims, rng):
        params = init_backbone(small_dims, rng)
        with pytest.raises(DimensionMismatchError):
            encode_image(params, np.zeros(small_dims.feature_dim + 1))

    def test_empty_text_zero_histogram(self, small_dims):
        params = zero_backbone(small_dims)
        np.testing.assert_array_equal(
            token_histogram("", small_dims.text_buckets), np.zeros(small_dims.text_buckets)
        )
        out = encode_text(params, small_dims, "")
        np.testing.assert_array_equal(out, np.zeros(small_dims.text_dim))

    def test_text_histogram_oracle(self, small_dims):
        # Oracle: recompute the unigram+bigram histogram with the same hash.
        import zlib

        text = "q effusion a yes effusion"
        hist = token_histogram(text, small_dims.text_buckets)
        expected = np.zeros(small_dims.text_buckets)
        toks = text.split()
        for gram in toks + [f"{x} {y}" for x, y in zip(toks, toks[1:])]:
            expected[zlib.crc32(gram.encode()) % small_dims.text_buckets] += 1
        np.testing.assert_array_equal(hist, expected)
        assert hist.sum() == 9  # 5 unigrams + 4 bigrams

    def test_history_order_changes_hash_input(self, small_dims):
        a = token_histogram("q1 yes q2 no", small_dims.text_buckets)
        b = token_histogram("q2 no q1 yes", small_dims.text_buckets)
        # same unigrams but different bigrams: order is visible to the hash
        assert not np.array_equal(a, b)


class TestFusionAndClassify:
    def test_fuse_hand_checked(self):
        dims = ModelDims(
            feature_dim=2, image_dim=2, text_buckets=4, text_dim=2,
            fused_dim=3, proj_dim=2, hidden_dim=2, n_answers=3,
        )
        params = zero_backbone(dims)
        params.w_fuse[:] = np.arange(12, dtype=float).reshape(3, 4) / 10.0
        img, txt = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        fused = fuse_features(params, img, txt)
        joint = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(fused.values, np.tanh(params.w_fuse @ joint))

    def test_classify_shape_contract(self, small_dims, rng):
        params = init_backbone(small_dims, rng)
        fused = FusedRepresentation(values=rng.normal(size=small_dims.fused_dim))
        logits = classify(params, fused)
        assert logits.values.shape == (small_dims.n_answers,)
        assert np.all(np.isfinite(logits.values))

    def test_end_to_end_shapes(self, small_dims, rng, template):
        params = init_backbone(small_dims, rng)
        trace = forward_base(
            params, small_dims, rng.normal(size=small_dims.feature_dim), "Q: anything"
        )
        assert trace.base_logits.shape == (template.n_answers,)
        assert np.all(np.isfinite(trace.base_logits))


class TestContext:
    def test_render_uses_option_texts(self, template):
        text = render_context(
            template, "l2_cardio", (("l1_heart", ("l1_heart/heart abnormal",)),)
        )
        assert text == "Q: any abnormality of the heart A: heart abnormal; Q: is cardiomegaly present"

    def test_empty_answer_renders_none(self, template):
        text = render_context(template, "l1_lung", (("l1_heart", ()),))
        assert "A: none" in text

    def test_history_must_precede(self, template):
        with pytest.raises(ValidationError):
            make_question_context(
                template, "l1_heart", (("l2_cardio", ("l2_cardio/cardiomegaly",)),)
            )
        ctx = make_question_context(
            template, "l2_cardio", (("l1_heart", ("l1_heart/heart abnormal",)),)
        )
        assert ctx.question_id == "l2_cardio"


class TestBackboneGradients:
    def test_matches_central_differences(self, small_dims, rng):
        # Quadratic probe loss on the base logits exercises every parameter.
        params = init_backbone(small_dims, rng)
        x = rng.normal(size=small_dims.feature_dim)
        text = "Q: is a pleural effusion present A: none"
        probe = rng.normal(size=small_dims.n_answers)

        def loss_of(p: BackboneParams) -> float:
            tr = forward_base(p, small_dims, x, text)
            return float(0.5 * np.sum((tr.base_logits - probe) ** 2))

        trace = forward_base(params, small_dims, x, text)
        d_logits = trace.base_logits - probe
        grads = backward_base(params, trace, d_logits)

        numeric = finite_difference_gradients(lambda: loss_of(params), params.named())
        assert max_relative_error(grads, numeric) < 1e-4


class TestImageEncoderFlattening:
    def test_roundtrip(self, small_dims, rng):
        params = init_backbone(small_dims, rng)
        flat = flatten_image_encoder(params)
        assert flat.shape == (small_dims.image_dim * small_dims.feature_dim + small_dims.image_dim,)
        restored = set_image_encoder(params, flat * 2.0)
        np.testing.assert_array_equal(restored.w_img, params.w_img * 2.0)
        np.testing.assert_array_equal(restored.b_img, params.b_img * 2.0)
        # other tensors shared unchanged
        np.testing.assert_array_equal(restored.w_cls, params.w_cls)
