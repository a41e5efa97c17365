import numpy as np
import pytest

from ctxood import (
    EncoderMismatchError,
    SyntheticSpec,
    SynthesisConfig,
    TrainConfig,
    concat_feature_sets,
    evaluate,
    gen_synthetic,
    incremental_eval,
    make_rng,
    merge_models,
    normalize_rows,
    score,
    score_batch,
    train_task,
)

TAU = 5.0


def _task(seed, c=3, d=10, n=25, offset=0.8):
    spec = SyntheticSpec(c, 2, d, n, concentration=25.0, spurious_offset=offset)
    return gen_synthetic(spec, make_rng(seed, 10))


def _train(id_set, seed=0, epochs=5, word_dim=16):
    cfg = TrainConfig(
        epochs=epochs,
        lr0=0.02,
        batch_size=16,
        logit_scale=TAU,
        context_len=2,
        word_dim=word_dim,
        synthesis=SynthesisConfig(sample_sigma=0.5),
        seed=seed,
    )
    return train_task(id_set, cfg, emit=lambda s: None)


@pytest.fixture(scope="module")
def two_models():
    # same seed -> bit-identical frozen encoder and mask, different tasks
    id_a, ood_a = _task(seed=200)
    id_b, ood_b = _task(seed=201)
    return (_train(id_a, seed=7), id_a, ood_a), (_train(id_b, seed=7), id_b, ood_b)


class TestMergeModels:
    def test_identity_merge(self, two_models):
        (model_a, _, _), _ = two_models
        merged = merge_models([model_a])
        assert merged.num_categories == model_a.num_categories
        assert np.array_equal(merged.perceptual_cache, model_a.perceptual_cache)
        assert np.array_equal(merged.encoder.weights, model_a.encoder.weights)
        for a, b in zip(merged.contexts, model_a.contexts):
            assert np.array_equal(a.perceptual, b.perceptual)
            assert np.array_equal(a.spurious, b.spurious)
            assert np.array_equal(a.class_embedding, b.class_embedding)

    def test_per_category_quantities_bit_exact(self, two_models):
        (model_a, id_a, _), (model_b, _, _) = two_models
        merged = merge_models([model_a, model_b])
        ca = model_a.num_categories
        rng = make_rng(202)
        for x in normalize_rows(rng.standard_normal((10, id_a.dim))):
            merged_rep = score(merged, x, tau=TAU)
            a_rep = score(model_a, x, tau=TAU)
            b_rep = score(model_b, x, tau=TAU)
            assert np.array_equal(merged_rep.similarities[:ca], a_rep.similarities)
            assert np.array_equal(merged_rep.similarities[ca:], b_rep.similarities)
            assert np.array_equal(merged_rep.regularizers[:ca], a_rep.regularizers)
            assert np.array_equal(merged_rep.regularizers[ca:], b_rep.regularizers)
            assert np.array_equal(merged_rep.integrated[:ca], a_rep.integrated)
            assert np.array_equal(merged_rep.integrated[ca:], b_rep.integrated)

    def test_merge_order_permutation_equivalent(self, two_models):
        (model_a, id_a, ood_a), (model_b, id_b, _) = two_models
        ab = merge_models([model_a, model_b])
        ba = merge_models([model_b, model_a])
        ca, cb = model_a.num_categories, model_b.num_categories
        batch = np.concatenate([id_a.features, id_b.features, ood_a.features])
        sab = score_batch(ab, batch, tau=TAU)
        sba = score_batch(ba, batch, tau=TAU)
        # relabel ba's indices into ab's order
        remap = np.concatenate([np.arange(cb, cb + ca), np.arange(cb)])
        assert np.array_equal(sab.ood_scores, sba.ood_scores)
        assert np.array_equal(remap[sba.predicted], sab.predicted)

    def test_merge_is_associative_on_decisions(self, two_models):
        (model_a, id_a, _), (model_b, _, _) = two_models
        id_c, _ = _task(seed=203)
        model_c = _train(id_c, seed=7, epochs=3)
        left = merge_models([merge_models([model_a, model_b]), model_c])
        right = merge_models([model_a, merge_models([model_b, model_c])])
        batch = normalize_rows(make_rng(204).standard_normal((20, id_a.dim)))
        sl = score_batch(left, batch, tau=TAU)
        sr = score_batch(right, batch, tau=TAU)
        assert np.array_equal(sl.predicted, sr.predicted)
        assert np.array_equal(sl.ood_scores, sr.ood_scores)

    def test_encoder_mismatch_rejected(self, two_models):
        (model_a, id_a, _), _ = two_models
        other = _train(id_a, seed=8)  # different seed -> different frozen encoder
        with pytest.raises(EncoderMismatchError):
            merge_models([model_a, other])

    def test_merged_category_count(self, two_models):
        (model_a, _, _), (model_b, _, _) = two_models
        merged = merge_models([model_a, model_b])
        assert merged.num_categories == model_a.num_categories + model_b.num_categories
        assert merged.perceptual_cache.shape[0] == merged.num_categories

    def test_merged_memory_linear_in_categories(self, two_models):
        # no cross-task parameters: merged arrays are exactly the sum of parts
        (model_a, _, _), (model_b, _, _) = two_models
        merged = merge_models([model_a, model_b])
        for attr in ("perceptual_cache", "spurious_cache"):
            assert getattr(merged, attr).nbytes == getattr(model_a, attr).nbytes + getattr(model_b, attr).nbytes
        words = lambda m: sum(c.perceptual.nbytes + c.spurious.nbytes + c.class_embedding.nbytes for c in m.contexts)
        assert words(merged) == words(model_a) + words(model_b)

    def test_merged_state_is_independent_copy(self, two_models):
        (model_a, _, _), (model_b, _, _) = two_models
        merged = merge_models([model_a, model_b])
        before = model_a.contexts[0].perceptual.copy()
        merged.contexts[0].perceptual += 1.0
        assert np.array_equal(model_a.contexts[0].perceptual, before)


class TestIncrementalEval:
    def test_single_model_equals_plain_evaluate(self, two_models):
        (model_a, id_a, ood_a), _ = two_models
        points = incremental_eval([model_a], [id_a], [("o", ood_a)], tau=TAU)
        direct = evaluate(model_a, id_a, [("o", ood_a)], tau=TAU)
        assert len(points) == 1
        assert points[0].cumulative_categories == model_a.num_categories
        assert points[0].accuracy == direct.id_accuracy
        assert points[0].fpr95 == direct.average.fpr_at_tpr
        assert points[0].auroc == direct.average.auroc

    def test_cumulative_counts(self, two_models):
        (model_a, id_a, ood_a), (model_b, id_b, _) = two_models
        points = incremental_eval([model_a, model_b], [id_a, id_b], [("o", ood_a)], tau=TAU)
        assert [p.cumulative_categories for p in points] == [3, 6]

    def test_disjoint_tasks_union_accuracy(self):
        # well-separated tasks: the union accuracy stays within 5 points of
        # the mean of standalone accuracies, across 5 seeds
        for seed in range(5):
            spec = SyntheticSpec(4, 1, 24, 30, concentration=40.0, spurious_offset=0.8)
            id_a, ood = gen_synthetic(spec, make_rng(seed, 300))
            id_b, _ = gen_synthetic(spec, make_rng(seed, 301))
            model_a = _train(id_a, seed=9, epochs=8, word_dim=32)
            model_b = _train(id_b, seed=9, epochs=8, word_dim=32)
            acc_a = evaluate(model_a, id_a, [("o", ood)], tau=TAU).id_accuracy
            acc_b = evaluate(model_b, id_b, [("o", ood)], tau=TAU).id_accuracy
            union_points = incremental_eval([model_a, model_b], [id_a, id_b], [("o", ood)], tau=TAU)
            union_acc = union_points[-1].accuracy
            assert union_acc >= (acc_a + acc_b) / 2 - 0.05

    def test_union_relabeling(self, two_models):
        (_, id_a, _), (_, id_b, _) = two_models
        union = concat_feature_sets([id_a, id_b])
        assert union.num_categories == id_a.num_categories + id_b.num_categories
        assert set(union.labels.tolist()) == set(range(6))
