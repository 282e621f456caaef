import numpy as np
import pytest

from fptag.corpus import Sentence
from fptag.nn import (
    AdamState,
    DivergenceError,
    Hyper,
    MissingEmbeddingError,
    PrecomputedEmbeddings,
    TaggerModel,
    TrainableLookup,
    backward,
    class_weights_from_counts,
    clip_and_step,
    embed,
    forward,
    forward_batch,
    global_norm,
    init_model,
    make_dropout_mask,
    predict_tags,
    softmax,
    weighted_ce_loss,
)

from conftest import make_sentence
from oracles import finite_difference_gradients, scalar_blstm_logits


def small_model(seed=3, d_emb=4, h=3, C=4, tokens=("aa", "bb", "cc"), dtype=np.float64):
    hyper = Hyper(d_emb=d_emb, hidden_size=h, num_classes=C, seed=seed)
    return init_model(list(tokens), C - 1, hyper, dtype=dtype)


class TestClassWeights:
    def test_hand_example(self):
        w = class_weights_from_counts([90, 9, 1])
        assert w == pytest.approx([3 / 101, 30 / 101, 270 / 101], rel=1e-12)
        assert w.mean() == pytest.approx(1.0, abs=1e-9)

    def test_uniform_counts_give_ones(self):
        assert np.allclose(class_weights_from_counts([5, 5, 5]), 1.0)

    def test_zero_count_class_uses_floor(self):
        w = class_weights_from_counts([1, 0], floor=1e-6)
        # raw weights (1, 1e6) rescaled to mean 1
        assert np.isfinite(w).all()
        assert w[1] == pytest.approx(2.0, rel=1e-5)
        assert w.mean() == pytest.approx(1.0, abs=1e-9)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            class_weights_from_counts([0, 0])


class TestEmbed:
    def test_row_count_is_morphemes_plus_sentinel(self):
        model = small_model()
        s = make_sentence([["aa", "bb"]], [0, 0, 0])
        assert embed(model.embedding, s).shape == (3, 4)

    def test_same_token_same_row(self):
        model = small_model()
        s = make_sentence([["aa", "aa"]], [0, 0, 0])
        X = embed(model.embedding, s)
        assert np.array_equal(X[0], X[1])

    def test_oov_maps_to_bucket_row(self):
        model = small_model()
        s = make_sentence([["zz"]], [0, 0])
        X = embed(model.embedding, s)
        assert np.array_equal(X[0], model.embedding.table[TrainableLookup.OOV_ROW])
        assert np.array_equal(X[1], model.embedding.table[TrainableLookup.EOS_ROW])

    def test_precomputed_contextual_rows_differ(self):
        vectors = {
            "s:0": np.array([[1.0, 0.0]], dtype=np.float32),
            "s:1": np.array([[0.0, 1.0]], dtype=np.float32),
        }
        provider = PrecomputedEmbeddings(2, vectors)
        s = make_sentence([["same"]], [0, 0])
        a = embed(provider, s, "s:0")
        b = embed(provider, s, "s:1")
        assert not np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], np.zeros(2))  # sentinel row

    def test_precomputed_missing_sentence(self):
        provider = PrecomputedEmbeddings(2, {})
        s = make_sentence([["x"]], [0, 0])
        with pytest.raises(MissingEmbeddingError):
            embed(provider, s, "nope:0")
        with pytest.raises(MissingEmbeddingError):
            embed(provider, s)

    def test_precomputed_count_mismatch(self):
        provider = PrecomputedEmbeddings(2, {"s:0": np.zeros((3, 2), dtype=np.float32)})
        s = make_sentence([["x"]], [0, 0])
        with pytest.raises(ValueError, match="vectors"):
            embed(provider, s, "s:0")

    def test_sidecar_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = {
            "spk:0": rng.normal(size=(4, 3)).astype(np.float32),
            "spk:1": rng.normal(size=(2, 3)).astype(np.float32),
        }
        provider = PrecomputedEmbeddings(3, vectors)
        path = tmp_path / "emb.bin"
        provider.save(path)
        loaded = PrecomputedEmbeddings.load(path)
        assert loaded.d_emb == 3
        for key in vectors:
            assert np.array_equal(loaded.vectors[key], vectors[key])

    def test_sidecar_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTEMB" + b"\0" * 16)
        with pytest.raises(ValueError, match="sidecar"):
            PrecomputedEmbeddings.load(path)

    def test_sidecar_rejects_trailing_bytes(self, tmp_path):
        provider = PrecomputedEmbeddings(2, {"a:0": np.zeros((1, 2), np.float32)})
        path = tmp_path / "emb.bin"
        provider.save(path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(ValueError, match="trailing"):
            PrecomputedEmbeddings.load(path)


class TestForward:
    def test_zero_parameters_give_zero_logits(self):
        model = small_model()
        for p in model.named_parameters().values():
            p[...] = 0.0
        X = np.ones((5, 4))
        assert np.array_equal(forward(model, X), np.zeros((5, 4)))

    def test_single_slot_shape(self):
        model = small_model()
        assert forward(model, np.ones((1, 4))).shape == (1, 4)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(9)
        model = small_model(seed=5)
        X = rng.normal(size=(5, 4))
        got = forward(model, X)
        expected = scalar_blstm_logits(model, X)
        assert np.allclose(got, expected, atol=1e-10)

    def test_batched_equals_looped(self):
        rng = np.random.default_rng(2)
        model = small_model(seed=6)
        X = rng.normal(size=(3, 6, 4))
        batched, _ = forward_batch(model, X)
        for b in range(3):
            assert np.allclose(batched[b], forward(model, X[b]), atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(scale=10, size=(20, 14))
        assert np.allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)

    def test_non_finite_raises(self):
        model = small_model()
        model.params.b_out[...] = np.inf
        with pytest.raises(DivergenceError):
            forward(model, np.ones((2, 4)))


class TestLoss:
    def test_uniform_two_class_single_slot(self):
        logits = np.zeros((1, 2))
        for weights in ([1.0, 1.0], [5.0, 0.2]):
            loss, _ = weighted_ce_loss(logits, [0], np.array(weights))
            assert loss == pytest.approx(np.log(2), rel=1e-12)

    def test_two_slot_hand_example(self):
        # p(gold) = 0.5 then 0.25, weights (2, 1) -> (2 ln2 + ln4)/3
        logits = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])
        loss, _ = weighted_ce_loss(logits, [0, 1], np.array([2.0, 1.0]))
        assert loss == pytest.approx((2 * np.log(2) + np.log(4)) / 3, rel=1e-12)
        assert loss == pytest.approx(0.924196, abs=1e-6)

    def test_equal_weights_reduce_to_unweighted_mean(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n, c = int(rng.integers(1, 12)), int(rng.integers(2, 6))
            logits = rng.normal(size=(n, c))
            gold = rng.integers(0, c, size=n)
            loss, _ = weighted_ce_loss(logits, gold, np.ones(c))
            logp = logits - logits.max(axis=1, keepdims=True)
            logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
            unweighted = -logp[np.arange(n), gold].mean()
            assert abs(loss - unweighted) <= 1e-12 * max(1.0, abs(unweighted))

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(7, 5))
        gold = rng.integers(0, 5, size=7)
        w = rng.uniform(0.1, 3.0, size=5)
        loss1, d1 = weighted_ce_loss(logits, gold, w)
        for k in (1e-3, 7.0, 1e4):
            loss2, d2 = weighted_ce_loss(logits, gold, k * w)
            assert abs(loss1 - loss2) <= 1e-12 * abs(loss1)
            assert np.all(np.abs(d1 - d2) <= 1e-12 * np.maximum(np.abs(d1), 1.0))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(4, 3))
        gold = np.array([0, 2, 1, 0])
        w = np.array([0.5, 1.5, 1.0])
        _, dlogits = weighted_ce_loss(logits, gold, w)
        eps = 1e-7
        for t in range(4):
            for c in range(3):
                logits[t, c] += eps
                hi, _ = weighted_ce_loss(logits, gold, w)
                logits[t, c] -= 2 * eps
                lo, _ = weighted_ce_loss(logits, gold, w)
                logits[t, c] += eps
                assert dlogits[t, c] == pytest.approx((hi - lo) / (2 * eps), abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_ce_loss(np.zeros((2, 3)), [0], np.ones(3))
        with pytest.raises(ValueError):
            weighted_ce_loss(np.zeros((2, 3)), [0, 1], np.ones(4))


class TestBackward:
    def test_zero_dlogits_zero_grads(self):
        model = small_model()
        X = np.ones((4, 4))
        grads = backward(model, X, np.zeros((4, 4)))
        for name, g in grads.items():
            assert np.allclose(g, 0.0), name

    def test_untouched_embedding_rows_have_zero_gradient(self):
        model = small_model(tokens=("aa", "bb", "cc", "dd"))
        s = make_sentence([["aa", "aa"]], [0, 1, 0])
        row_ids = model.embedding.row_ids(s)
        X = embed(model.embedding, s)
        _, dlogits = weighted_ce_loss(forward(model, X), s.fp_tags, model.class_weights)
        grads = backward(model, X, dlogits, row_ids=row_ids)
        table_grad = grads["embedding.table"]
        touched = set(row_ids.tolist())
        for row in range(table_grad.shape[0]):
            if row not in touched:
                assert np.all(table_grad[row] == 0.0)
            else:
                assert np.any(table_grad[row] != 0.0)

    def test_all_parameter_groups_pass_finite_differences(self):
        model = small_model(seed=14)
        s = make_sentence([["aa", "bb"], ["cc", "zz"]], [0, 1, 3, 0, 2])
        weights = class_weights_from_counts([4, 2, 1, 1])
        row_ids = model.embedding.row_ids(s)

        def loss_fn():
            X = embed(model.embedding, s)
            loss, _ = weighted_ce_loss(forward(model, X), s.fp_tags, weights)
            return loss

        X = embed(model.embedding, s)
        logits, cache = forward(model, X, return_cache=True)
        _, dlogits = weighted_ce_loss(logits, s.fp_tags, weights)
        analytic = backward(model, X, dlogits, cache=cache, row_ids=row_ids)
        numeric = finite_difference_gradients(loss_fn, model.named_parameters(), eps=1e-3)
        for name, fd in numeric.items():
            an = analytic[name]
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-4)
            rel = np.abs(fd - an) / denom
            assert rel.max() < 1e-4, f"{name}: max rel err {rel.max():.3g}"

    def test_dropout_mask_respected_in_gradients(self):
        model = small_model(seed=15)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(4, 4))
        gold = np.array([0, 1, 2, 3])
        mask = make_dropout_mask(rng, (4, 6), 0.5, dtype=np.float64)
        weights = np.ones(4)

        def loss_fn():
            loss, _ = weighted_ce_loss(forward(model, X, dropout_mask=mask), gold, weights)
            return loss

        logits, cache = forward(model, X, dropout_mask=mask, return_cache=True)
        _, dlogits = weighted_ce_loss(logits, gold, weights)
        analytic = backward(model, X, dlogits, cache=cache)
        numeric = finite_difference_gradients(loss_fn, model.named_parameters(), eps=1e-4)
        for name, fd in numeric.items():
            if name == "embedding.table":
                continue  # X fixed here, table not in the graph
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic[name])), 1e-4)
            assert (np.abs(fd - analytic[name]) / denom).max() < 1e-4, name


class TestOptimizer:
    def test_norm_above_max_scales_all_entries(self):
        params = {"a": np.array([1.0, 1.0]), "b": np.array([[1.0, 1.0]])}
        # gradient vector of four 0.5 entries -> global norm 1.0
        grads = {"a": np.full(2, 0.5), "b": np.full((1, 2), 0.5)}
        assert global_norm(grads) == pytest.approx(1.0)
        state = AdamState.for_params(params)
        clip_and_step(params, grads, state, lr=0.1, max_norm=0.5)
        # after halving, every grad entry is 0.25 -> identical Adam updates
        assert np.allclose(params["a"], params["a"][0])
        # first-step Adam update magnitude ~ lr regardless of scale, so check m
        assert np.allclose(state.m["a"], 0.1 * 0.25)

    def test_norm_below_max_leaves_grads_unchanged(self):
        params = {"a": np.zeros(2)}
        grads = {"a": np.array([0.3, 0.0])}
        state = AdamState.for_params(params)
        clip_and_step(params, grads, state, lr=1.0, max_norm=0.5)
        assert state.m["a"][0] == pytest.approx(0.1 * 0.3)

    def test_single_scalar_adam_first_step(self):
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([0.1])}
        state = AdamState.for_params(params)
        clip_and_step(params, grads, state, lr=1e-3, max_norm=0.5)
        update = params["w"][0] - 1.0
        assert update == pytest.approx(-9.9999e-4, rel=1e-4)

    def test_non_finite_gradients_rejected(self):
        params = {"a": np.zeros(2)}
        state = AdamState.for_params(params)
        with pytest.raises(DivergenceError):
            clip_and_step(params, {"a": np.array([np.nan, 0.0])}, state, 0.1, 0.5)

    def test_adam_descends_on_quadratic(self):
        params = {"w": np.array([3.0])}
        state = AdamState.for_params(params)
        for _ in range(500):
            clip_and_step(params, {"w": 2.0 * params["w"]}, state, lr=0.05, max_norm=1e9)
        assert abs(params["w"][0]) < 0.1


class TestPredict:
    def test_all_no_fp_when_class0_favored(self):
        model = small_model()
        model.params.b_out[...] = 0.0
        model.params.b_out[0] = 10.0
        s = make_sentence([["aa", "bb", "cc"]], [1, 2, 3, 0])
        assert predict_tags(model, s) == [0, 0, 0, 0]

    def test_tie_goes_to_smaller_class(self):
        model = small_model()
        for p in model.named_parameters().values():
            p[...] = 0.0  # all logits zero: every class ties
        s = make_sentence([["aa"]], [0, 0])
        assert predict_tags(model, s) == [0, 0]

    def test_constant_logit_shift_does_not_change_prediction(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 4))
        shifted = logits + 123.45
        assert np.array_equal(np.argmax(logits, axis=1), np.argmax(shifted, axis=1))

    def test_hand_set_projection_selects_class_2(self):
        model = small_model(seed=20)
        # zero the recurrent machinery, leave only b_out; then bias slot 1
        for name, p in model.named_parameters().items():
            p[...] = 0.0
        model.params.b_out[...] = np.array([1.0, 0.0, 2.0, 0.0])
        s = make_sentence([["aa", "bb"]], [0, 0, 0])
        assert predict_tags(model, s) == [2, 2, 2]

    def test_same_seed_same_init(self):
        a = small_model(seed=77)
        b = small_model(seed=77)
        for (na, pa), (nb, pb) in zip(
            a.named_parameters().items(), b.named_parameters().items()
        ):
            assert na == nb
            assert np.array_equal(pa, pb)
