"""Accumulator, threshold, predictor, and representer-query behavior."""

from __future__ import annotations

import functools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reprloc import (
    Accumulator,
    DegenerateDatasetError,
    FeatureMap,
    FitError,
    QueryError,
    accumulate,
    finalize_predictor,
    finalize_tau,
    fit,
    importance_map,
    load_predictor,
    merge,
    normalize_feature,
    representer_topk,
    save_predictor,
    tau_gram_oracle,
)
from reprloc.core import resolve_threads, sample_entries
from conftest import TOY_TAU, TOY_W, random_feature_stack, toy_feature_map, write_dataset


class TestNormalizeFeature:
    def test_three_four_five(self):
        out = normalize_feature(np.array([3.0, 4.0]))
        assert np.allclose(out, [0.6, 0.8], atol=1e-12)

    def test_zero_flag(self):
        assert normalize_feature(np.zeros(4)) is None

    def test_random_unit_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            out = normalize_feature(rng.normal(size=16))
            assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_feature(np.array([1.0, np.inf]))


class TestAccumulate:
    def test_single_patch(self):
        acc = Accumulator(dim=2)
        fm = FeatureMap("p", np.array([[[2.0]], [[0.0]]], dtype=np.float32))
        accumulate(acc, fm)
        assert np.allclose(acc.feature_sum, [2.0, 0.0])
        assert np.allclose(acc.unit_sum, [1.0, 0.0])
        assert acc.patch_count == 1
        assert acc.image_count == 1

    def test_toy_pair(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        assert np.allclose(acc.feature_sum, [2.0, 1.0])
        assert np.allclose(acc.unit_sum, [1.0, 1.0])

    def test_all_zero_map_only_counts_skips(self):
        acc = accumulate(Accumulator(dim=3), toy_zero_map())
        assert np.all(acc.feature_sum == 0.0)
        assert np.all(acc.unit_sum == 0.0)
        assert acc.skipped_zero_vectors == 4
        assert acc.patch_count == 4

    def test_dimension_mismatch(self):
        with pytest.raises(FitError):
            accumulate(Accumulator(dim=5), toy_feature_map())

    def test_unit_sum_triangle_inequality(self):
        rng = np.random.default_rng(9)
        acc = Accumulator(dim=8)
        for data in random_feature_stack(rng, 6, 8, 3, 3, zero_patch_prob=0.2):
            accumulate(acc, FeatureMap("x", data))
        bound = acc.patch_count - acc.skipped_zero_vectors
        assert np.linalg.norm(acc.unit_sum) <= bound + 1e-9


def toy_zero_map() -> FeatureMap:
    return FeatureMap("z", np.zeros((3, 2, 2), dtype=np.float32))


class TestMerge:
    def test_identity_element(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        merged = merge(acc, Accumulator(dim=2))
        assert np.array_equal(merged.feature_sum, acc.feature_sum)
        assert np.array_equal(merged.unit_sum, acc.unit_sum)
        assert merged.patch_count == acc.patch_count

    def test_matches_sequential(self):
        rng = np.random.default_rng(1)
        img1, img2 = random_feature_stack(rng, 2, 4, 2, 3)
        a = accumulate(Accumulator(dim=4), FeatureMap("a", img1))
        b = accumulate(Accumulator(dim=4), FeatureMap("b", img2))
        sequential = Accumulator(dim=4)
        accumulate(sequential, FeatureMap("a", img1))
        accumulate(sequential, FeatureMap("b", img2))
        merged = merge(a, b)
        assert np.allclose(merged.feature_sum, sequential.feature_sum, rtol=1e-9)
        assert np.allclose(merged.unit_sum, sequential.unit_sum, rtol=1e-9)

    def test_tree_orders_agree(self):
        rng = np.random.default_rng(2)
        accs = [
            accumulate(Accumulator(dim=6), FeatureMap(f"i{k}", data))
            for k, data in enumerate(random_feature_stack(rng, 8, 6, 2, 2))
        ]
        left = functools.reduce(merge, accs)
        pairs = [merge(accs[i], accs[i + 1]) for i in range(0, 8, 2)]
        quads = [merge(pairs[0], pairs[1]), merge(pairs[2], pairs[3])]
        tree = merge(quads[0], quads[1])
        assert np.allclose(left.feature_sum, tree.feature_sum, rtol=1e-9)
        assert np.allclose(left.unit_sum, tree.unit_sum, rtol=1e-9)
        assert left.patch_count == tree.patch_count

    @given(st.permutations(list(range(6))))
    @settings(max_examples=25, deadline=None)
    def test_commutes_under_permutation(self, order):
        rng = np.random.default_rng(42)
        stacks = random_feature_stack(rng, 6, 3, 2, 2)
        accs = [
            accumulate(Accumulator(dim=3), FeatureMap(f"i{k}", data))
            for k, data in enumerate(stacks)
        ]
        baseline = functools.reduce(merge, accs)
        shuffled = functools.reduce(merge, [accs[i] for i in order])
        np.testing.assert_allclose(
            shuffled.feature_sum, baseline.feature_sum, rtol=1e-9, atol=1e-12
        )
        np.testing.assert_allclose(
            shuffled.unit_sum, baseline.unit_sum, rtol=1e-9, atol=1e-12
        )


class TestTau:
    def test_symmetric_pair_gives_one(self):
        acc = Accumulator(dim=2)
        accumulate(acc, FeatureMap("s", np.array([[[1.0, 0.0]], [[0.0, 1.0]]], np.float32)))
        assert finalize_tau(acc) == pytest.approx(1.0, abs=1e-12)

    def test_toy_value(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        assert finalize_tau(acc) == pytest.approx(TOY_TAU, rel=1e-12)

    def test_degenerate_dataset(self):
        acc = accumulate(Accumulator(dim=3), toy_zero_map())
        with pytest.raises(DegenerateDatasetError):
            finalize_tau(acc)

    def test_gram_oracle_toy(self):
        value = tau_gram_oracle(np.array([[2.0, 0.0], [0.0, 1.0]]))
        assert value == pytest.approx(math.sqrt(5.0 / 2.0), rel=1e-12)

    def test_gram_oracle_singleton(self):
        assert tau_gram_oracle(np.array([[1.0, 0.0]])) == pytest.approx(1.0, abs=1e-12)

    def test_gram_oracle_matches_stream_on_random_data(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            vectors = rng.normal(size=(50, 8))
            acc = Accumulator(dim=8)
            accumulate(acc, FeatureMap("v", vectors.T.reshape(8, 50, 1).astype(np.float32)))
            stream = finalize_tau(acc)
            gram = tau_gram_oracle(vectors.astype(np.float32).astype(np.float64))
            assert abs(gram - stream) / stream < 1e-6


class TestFinalizePredictor:
    def test_toy_weights(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        pred = finalize_predictor(acc)
        assert pred.weights == pytest.approx(TOY_W, rel=1e-9)
        assert pred.tau == pytest.approx(TOY_TAU, rel=1e-12)

    def test_equal_norms_give_null_predictor(self):
        acc = Accumulator(dim=2)
        accumulate(acc, FeatureMap("s", np.array([[[1.0, 0.0]], [[0.0, 1.0]]], np.float32)))
        pred = finalize_predictor(acc)
        assert np.allclose(pred.weights, 0.0, atol=1e-12)

    def test_tau_override_zero_keeps_feature_sum(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        pred = finalize_predictor(acc, constant_c=2.0, tau_override=0.0)
        assert np.array_equal(pred.weights, acc.feature_sum / 2.0)
        assert pred.tau == 0.0

    def test_constant_scales_weights(self):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        one = finalize_predictor(acc, constant_c=1.0)
        two = finalize_predictor(acc, constant_c=2.0)
        assert np.allclose(one.weights, 2.0 * two.weights, rtol=1e-12)

    def test_predictor_roundtrip(self, tmp_path):
        acc = accumulate(Accumulator(dim=2), toy_feature_map())
        pred = finalize_predictor(acc, provenance={"manifest_digest": "d" * 64})
        save_predictor(pred, tmp_path / "p.json")
        back = load_predictor(tmp_path / "p.json")
        assert np.array_equal(back.weights, pred.weights)
        assert back.tau == pred.tau
        assert back.provenance["manifest_digest"] == "d" * 64


class TestImportanceMap:
    def test_toy_values(self):
        im = importance_map(toy_feature_map(), TOY_TAU)
        assert im.alpha.ravel() == pytest.approx(TOY_W, rel=1e-6)

    def test_threshold_crossing_is_zero(self):
        fm = FeatureMap("t", np.array([[[3.0]], [[4.0]]], dtype=np.float32))
        im = importance_map(fm, 5.0)
        assert im.alpha[0, 0] == pytest.approx(0.0, abs=1e-7)

    def test_constant_halves_alpha(self):
        fm = toy_feature_map()
        one = importance_map(fm, 1.0, constant_c=1.0)
        two = importance_map(fm, 1.0, constant_c=2.0)
        assert np.allclose(one.alpha, 2.0 * two.alpha, rtol=1e-12)

    def test_zero_patch_gets_floor_value(self):
        im = importance_map(toy_zero_map(), 2.0, constant_c=4.0)
        assert np.all(im.alpha == -0.5)


class TestSampling:
    def test_rate_one_keeps_everything_without_rng(self, tmp_path):
        manifest = write_dataset(
            tmp_path,
            {f"i{k}": np.ones((2, 1, 1), dtype=np.float32) for k in range(5)},
        )
        a = sample_entries(manifest.entries, 1.0, seed=1)
        b = sample_entries(manifest.entries, 1.0, seed=999)
        assert a == b == manifest.entries

    def test_deterministic_per_seed(self, tmp_path):
        manifest = write_dataset(
            tmp_path,
            {f"i{k}": np.ones((2, 1, 1), dtype=np.float32) for k in range(20)},
        )
        first = sample_entries(manifest.entries, 0.3, seed=4)
        second = sample_entries(manifest.entries, 0.3, seed=4)
        other = sample_entries(manifest.entries, 0.3, seed=5)
        assert first == second
        assert [e.image_id for e in first] != [e.image_id for e in other]
        assert len(first) == 6  # round(0.3 * 20)

    def test_rate_validation(self, tmp_path):
        manifest = write_dataset(tmp_path, {"a": np.ones((2, 1, 1), dtype=np.float32)})
        with pytest.raises(ValueError):
            sample_entries(manifest.entries, 0.0, seed=0)


class TestFit:
    def _two_class_manifest(self, tmp_path):
        rng = np.random.default_rng(21)
        arrays = {
            f"i{k}": rng.normal(1.0, 0.5, size=(4, 2, 2)).astype(np.float32)
            for k in range(6)
        }
        return write_dataset(
            tmp_path, arrays, class_ids={f"i{k}": k % 2 for k in range(6)}
        )

    def test_single_class_classwise_equals_agnostic(self, tmp_path):
        rng = np.random.default_rng(3)
        arrays = {
            f"i{k}": rng.normal(size=(3, 2, 2)).astype(np.float32) for k in range(4)
        }
        manifest = write_dataset(
            tmp_path, arrays, class_ids={k: 0 for k in arrays}
        )
        agnostic = fit(manifest)[0]
        classwise = fit(manifest, classwise=True)
        assert len(classwise) == 1
        assert np.array_equal(classwise[0].weights, agnostic.weights)
        assert classwise[0].tau == agnostic.tau

    def test_rate_one_ignores_seed(self, tmp_path):
        manifest = self._two_class_manifest(tmp_path)
        a = fit(manifest, seed=1)[0]
        b = fit(manifest, seed=2)[0]
        assert np.array_equal(a.weights, b.weights)

    def test_classwise_additivity(self, tmp_path):
        manifest = self._two_class_manifest(tmp_path)
        per_class = fit(manifest, classwise=True, tau_override=0.0)
        total = fit(manifest, tau_override=0.0)[0]
        # with threshold forced to zero the weights are exactly the feature sums
        np.testing.assert_allclose(
            per_class[0].weights + per_class[1].weights,
            total.weights,
            rtol=1e-9,
        )

    def test_classwise_requires_labels(self, tmp_path):
        manifest = write_dataset(tmp_path, {"a": np.ones((2, 1, 1), dtype=np.float32)})
        with pytest.raises(FitError, match="class_id"):
            fit(manifest, classwise=True)

    def test_provenance_recorded(self, tmp_path):
        manifest = self._two_class_manifest(tmp_path)
        pred = fit(manifest, sample_rate=0.5, seed=9)[0]
        prov = pred.provenance
        assert prov["sample_rate"] == 0.5
        assert prov["seed"] == 9
        assert prov["image_count"] == 3
        assert len(prov["manifest_digest"]) == 64

    def test_global_tau_mode_shares_threshold(self, tmp_path):
        manifest = self._two_class_manifest(tmp_path)
        shared = fit(manifest, classwise=True, per_class_tau=False)
        assert shared[0].tau == shared[1].tau
        per_class = fit(manifest, classwise=True)
        assert per_class[0].tau != per_class[1].tau

    def test_threads_match_sequential(self, tmp_path, monkeypatch):
        manifest = self._two_class_manifest(tmp_path)
        sequential = fit(manifest)[0]
        monkeypatch.setenv("REPRLOC_THREADS", "4")
        threaded = fit(manifest, threads=4)[0]
        np.testing.assert_allclose(threaded.weights, sequential.weights, rtol=1e-9)

    def test_kahan_matches_plain(self, tmp_path):
        manifest = self._two_class_manifest(tmp_path)
        plain = fit(manifest)[0]
        compensated = fit(manifest, use_kahan=True)[0]
        np.testing.assert_allclose(compensated.weights, plain.weights, rtol=1e-12)


class TestResolveThreads:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv("REPRLOC_THREADS", raising=False)
        assert resolve_threads() == 1

    def test_env_caps_request(self, monkeypatch):
        monkeypatch.setenv("REPRLOC_THREADS", "2")
        assert resolve_threads(8) == 2
        assert resolve_threads() == 2

    def test_garbage_env_ignored(self, monkeypatch):
        monkeypatch.setenv("REPRLOC_THREADS", "lots")
        assert resolve_threads(3) == 3


class TestRepresenterTopk:
    def test_toy_query(self, toy_manifest):
        query = FeatureMap("q", np.array([[[1.0]], [[0.0]]], dtype=np.float32))
        result = representer_topk(toy_manifest, TOY_TAU, query, 0, 0, k=1)
        top = result.excitatory[0]
        assert top.image_id == "toy" and (top.row, top.col) == (0, 0)
        assert top.value == pytest.approx(TOY_W[0], rel=1e-6)
        # patch (0, 1) has direction (0, 1), orthogonal to the query
        assert result.inhibitory[0].value == pytest.approx(0.0, abs=1e-12)
        assert result.activation_sum == pytest.approx(TOY_W[0], rel=1e-6)

    def test_value_is_exact_product(self, toy_manifest):
        query = FeatureMap("q", np.array([[[1.0]], [[1.0]]], dtype=np.float32))
        result = representer_topk(toy_manifest, TOY_TAU, query, 0, 0, k=2)
        for entry in result.excitatory + result.inhibitory:
            assert entry.value == entry.alpha * entry.similarity

    def test_orthogonal_query_breaks_ties_lexicographically(self, tmp_path):
        # training patches all along axis 0; query along axis 1
        along_first_axis = np.zeros((2, 1, 2), dtype=np.float32)
        along_first_axis[0] = 1.0
        manifest = write_dataset(
            tmp_path, {"b_img": along_first_axis, "a_img": along_first_axis}
        )
        query = FeatureMap("q", np.array([[[0.0]], [[1.0]]], dtype=np.float32))
        result = representer_topk(manifest, 0.5, query, 0, 0, k=3)
        assert all(e.value == 0.0 for e in result.excitatory)
        assert [(e.image_id, e.row, e.col) for e in result.excitatory] == [
            ("a_img", 0, 0),
            ("a_img", 0, 1),
            ("b_img", 0, 0),
        ]

    def test_sum_matches_predictor_activation(self, tmp_path):
        rng = np.random.default_rng(17)
        arrays = {
            f"i{k}": data
            for k, data in enumerate(random_feature_stack(rng, 4, 8, 3, 3))
        }
        manifest = write_dataset(tmp_path, arrays)
        pred = fit(manifest)[0]
        query = FeatureMap("q", rng.normal(size=(8, 2, 2)).astype(np.float32))
        for row in range(2):
            for col in range(2):
                result = representer_topk(manifest, pred.tau, query, row, col, k=3)
                unit = normalize_feature(query.data[:, row, col])
                direct = float(pred.weights @ unit)
                rel = abs(result.activation_sum - direct) / max(abs(direct), 1e-12)
                assert rel < 1e-5

    def test_zero_norm_query_rejected(self, toy_manifest):
        query = FeatureMap("q", np.zeros((2, 1, 1), dtype=np.float32))
        with pytest.raises(QueryError, match="zero norm"):
            representer_topk(toy_manifest, 1.0, query, 0, 0, k=1)

    def test_out_of_range_patch_rejected(self, toy_manifest):
        query = FeatureMap("q", np.ones((2, 1, 1), dtype=np.float32))
        with pytest.raises(QueryError, match="outside grid"):
            representer_topk(toy_manifest, 1.0, query, 3, 0, k=1)

    def test_k_saturation_returns_all(self, toy_manifest):
        query = FeatureMap("q", np.array([[[1.0]], [[0.0]]], dtype=np.float32))
        result = representer_topk(toy_manifest, TOY_TAU, query, 0, 0, k=50)
        assert len(result.excitatory) == 2
        assert len(result.inhibitory) == 2
        values = [e.value for e in result.excitatory]
        assert values == sorted(values, reverse=True)

    def test_zero_norm_training_patches_skipped(self, tmp_path):
        data = np.zeros((2, 1, 3), dtype=np.float32)
        data[:, 0, 0] = [2.0, 0.0]
        manifest = write_dataset(tmp_path, {"mix": data})
        query = FeatureMap("q", np.array([[[1.0]], [[0.0]]], dtype=np.float32))
        result = representer_topk(manifest, 1.0, query, 0, 0, k=10)
        assert result.patches_skipped == 2
        assert len(result.excitatory) == 1


class TestLinearCombinationIdentity:
    """Foreground score == sum of per-training-patch contributions."""

    def test_random_instances(self):
        rng = np.random.default_rng(23)
        worst = 0.0
        for _ in range(30):
            n = int(rng.integers(1, 9))
            c = int(rng.integers(2, 17))
            h = int(rng.integers(1, 5))
            w = int(rng.integers(1, 5))
            train = random_feature_stack(rng, n, c, h, w, zero_patch_prob=0.1)
            acc = Accumulator(dim=c)
            for k, data in enumerate(train):
                accumulate(acc, FeatureMap(f"i{k}", data))
            if np.linalg.norm(acc.unit_sum) == 0.0:
                continue
            pred = finalize_predictor(acc)

            flat = np.concatenate([d.reshape(c, -1) for d in train], axis=1).astype(
                np.float64
            )
            norms = np.linalg.norm(flat, axis=0)
            keep = norms > 0
            units = flat[:, keep] / norms[keep]
            alphas = norms[keep] - pred.tau

            test = rng.normal(size=(c, 6))
            test_norms = np.linalg.norm(test, axis=0)
            test_units = test / test_norms
            for j in range(6):
                direct = float(pred.weights @ test_units[:, j])
                brute = float(np.sum(alphas * (units.T @ test_units[:, j])))
                rel = abs(direct - brute) / max(abs(direct), abs(brute), 1e-12)
                worst = max(worst, rel)
        assert worst < 1e-5


class TestScaleEquivariance:
    def test_exact_for_power_of_two_scale(self):
        rng = np.random.default_rng(31)
        data = rng.normal(size=(4, 3, 3)).astype(np.float32)
        scale = 0.5  # exactly representable: all float ops scale exactly
        acc1 = accumulate(Accumulator(dim=4), FeatureMap("a", data))
        acc2 = accumulate(Accumulator(dim=4), FeatureMap("a", data * scale))
        assert np.array_equal(acc2.feature_sum, acc1.feature_sum * scale)
        assert np.array_equal(acc2.unit_sum, acc1.unit_sum)
        assert finalize_tau(acc2) == finalize_tau(acc1) * scale

    def test_tolerant_for_general_scale(self):
        rng = np.random.default_rng(33)
        data = rng.normal(size=(4, 3, 3)).astype(np.float32)
        scale = 3.0
        acc1 = accumulate(Accumulator(dim=4), FeatureMap("a", data))
        acc2 = accumulate(
            Accumulator(dim=4), FeatureMap("a", (data * scale).astype(np.float32))
        )
        np.testing.assert_allclose(acc2.feature_sum, acc1.feature_sum * scale, rtol=1e-6)
        np.testing.assert_allclose(acc2.unit_sum, acc1.unit_sum, rtol=1e-6)
        assert finalize_tau(acc2) == pytest.approx(finalize_tau(acc1) * scale, rel=1e-6)
