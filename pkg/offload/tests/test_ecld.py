import math
import tempfile
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from offload.ecld import (
    DistillConfig, ImportanceScores, QuantSpec, ToyNetSpec, ToyNetwork, VariantProfile, apply_mask, build_masks,
    compute_importance, distill_loss, distill_loss_grad, fit_quant_range, load_catalog, offline_accuracy,
    offline_hallucination, quantization_error, quantize, read_jsonl, soften, split_accuracy_records,
    threshold_mask,
)

from .gradcheck import assert_grads_close, numeric_grad

SMALL = ToyNetSpec(n_in=4, n_embed=3, n_layers=2, n_heads=2, head_size=2, n_classes=3)


class CatalogTests(SimpleTestCase):
    def test_bundled_catalog_has_every_family_and_method(self):
        catalog = load_catalog(settings.EDGEFLOCK['PROFILE_CATALOG'])
        self.assertEqual(len(catalog), 15)
        self.assertEqual({p.family for p in catalog.values()}, {'llama-3.1-8b', 'qwen3-8b', 'mistral-12b'})
        ours = catalog['llama-3.1-8b/ours']
        self.assertAlmostEqual(ours.offline_accuracy, 0.5905)
        self.assertAlmostEqual(ours.offline_hallucination, 0.65)

    def test_out_of_range_accuracy_is_rejected(self):
        with self.assertRaises(ValueError):
            VariantProfile('bad', offline_accuracy=60.39, offline_hallucination=0.7, storage_mb=1, energy_wh=1)

    def test_malformed_catalog_entry_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'catalog.json'
            path.write_text('{"x": {"offline_accuracy": 0.5, "colour": "red"}}')
            with self.assertRaises(ValueError):
                load_catalog(path)


class ImportanceTests(SimpleTestCase):
    def setUp(self):
        self.net = ToyNetwork(SMALL, rng=np.random.default_rng(0))
        self.calibration = np.random.default_rng(1).standard_normal((8, SMALL.n_in))

    def test_scores_are_non_negative_with_expected_shapes(self):
        scores = compute_importance(self.net, self.calibration)
        self.assertEqual(scores.layer.shape, (2,))
        self.assertEqual(scores.neuron.shape, (2, 4))
        self.assertEqual(scores.head.shape, (2, 2))
        self.assertEqual(scores.embed.shape, (3,))
        self.assertTrue(np.all(scores.neuron >= 0))

    def test_dead_unit_scores_zero(self):
        self.net.params['W_out0'][1] = 0.0
        scores = compute_importance(self.net, self.calibration)
        self.assertEqual(scores.neuron[0, 1], 0.0)

    def test_empty_calibration_is_rejected(self):
        with self.assertRaises(ValueError):
            compute_importance(self.net, np.zeros((0, SMALL.n_in)))

    def test_negative_scores_are_rejected(self):
        with self.assertRaises(ValueError):
            ImportanceScores(
                layer=np.array([-1.0, 0.0]), neuron=np.zeros((2, 4)), head=np.zeros((2, 2)), embed=np.zeros(3), spec=SMALL,
            )


class MaskTests(SimpleTestCase):
    def setUp(self):
        self.scores = ImportanceScores(
            layer=np.array([0.5, 0.05]),
            neuron=np.array([[0.3, 0.01, 0.4, 0.2], [0.2, 0.2, 0.2, 0.2]]),
            head=np.array([[0.5, 0.5], [0.05, 0.5]]),
            embed=np.array([0.2, 0.3, 0.01]),
            spec=SMALL,
        )

    def test_threshold_mask_keeps_scores_at_threshold(self):
        np.testing.assert_array_equal(threshold_mask([0.1, 0.2, 0.3], 0.2), [0.0, 1.0, 1.0])

    def test_zero_threshold_keeps_everything(self):
        mask = build_masks(self.scores, 0.0)
        total = sum(m.size for m in mask.combined.values())
        self.assertEqual(mask.popcount(), total)

    def test_masks_follow_scores(self):
        mask = build_masks(self.scores, 0.1)
        np.testing.assert_array_equal(mask.keep['embed'], [1.0, 1.0, 0.0])
        np.testing.assert_array_equal(mask.depth, [1.0, 0.0])
        # neuron 1 of layer 0 drops, and head 0 of layer 1 takes units 0-1 with it
        np.testing.assert_array_equal(mask.keep['unit'], [[1, 0, 1, 1], [0, 0, 1, 1]])
        self.assertFalse(mask.combined['W_in1'].any())
        np.testing.assert_array_equal(mask.combined['embed'][:, 2], 0.0)

    def test_combined_count_never_exceeds_width_or_depth(self):
        mask = build_masks(self.scores, 0.1)
        self.assertLessEqual(mask.popcount(), mask.popcount('width'))
        self.assertLessEqual(mask.popcount(), mask.depth_popcount(SMALL))

    def test_apply_mask_is_hadamard(self):
        np.testing.assert_array_equal(apply_mask(np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]])), [[0.0, 2.0]])
        np.testing.assert_array_equal(apply_mask(np.ones((2, 3)), np.array([1.0, 0.0, 1.0])), [[1, 0, 1], [1, 0, 1]])

    def test_apply_mask_rejects_shape_change(self):
        with self.assertRaises(ValueError):
            apply_mask(np.ones(3), np.ones((2, 3)))
        with self.assertRaises(ValueError):
            apply_mask(np.ones((2, 3)), np.ones(2))


class DistillTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(4)
        self.student = rng.standard_normal((5, 3))
        self.teacher = rng.standard_normal((5, 3))
        self.labels = np.eye(3)[[0, 1, 2, 0, 1]]

    def test_alpha_zero_is_cross_entropy(self):
        loss = distill_loss(self.student, self.teacher, self.labels, DistillConfig(alpha=0.0, tau=2.0))
        log_p = self.student - np.log(np.sum(np.exp(self.student), axis=1, keepdims=True))
        self.assertAlmostEqual(loss, float(-np.mean(np.sum(self.labels * log_p, axis=1))))

    def test_kl_vanishes_when_student_matches_teacher(self):
        loss = distill_loss(self.teacher, self.teacher, self.labels, DistillConfig(alpha=1.0, tau=3.0))
        self.assertAlmostEqual(loss, 0.0, places=12)

    def test_gradient_matches_finite_differences(self):
        cfg = DistillConfig(alpha=0.3, tau=2.5)
        expected = numeric_grad(lambda: distill_loss(self.student, self.teacher, self.labels, cfg), self.student)
        np.testing.assert_allclose(distill_loss_grad(self.student, self.teacher, self.labels, cfg), expected, rtol=1e-5, atol=1e-8)

    def test_temperature_softens(self):
        logits = np.array([[3.0, 0.0]])
        self.assertLess(soften(logits, 4.0)[0, 0], soften(logits, 1.0)[0, 0])

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            DistillConfig(alpha=0.5, tau=0.0)
        with self.assertRaises(ValueError):
            soften(self.student, -1.0)
        with self.assertRaises(ValueError):
            distill_loss(self.student[:, :2], self.teacher, self.labels, DistillConfig())

    def test_toy_network_backward_matches_finite_differences(self):
        net = ToyNetwork(SMALL, rng=np.random.default_rng(5))
        x = np.random.default_rng(6).standard_normal((4, SMALL.n_in))
        weights = np.random.default_rng(7).standard_normal((4, SMALL.n_classes))
        _, cache = net.forward(x)
        grads = net.backward(cache, weights)
        assert_grads_close(self, lambda: float(np.sum(net(x) * weights)), net.params, grads)


class QuantizeTests(SimpleTestCase):
    def test_levels_are_on_the_lattice(self):
        spec = QuantSpec(2, 0.0, 3.0)
        np.testing.assert_allclose(quantize([-1.0, 0.4, 1.6, 2.4, 9.0], spec), [0.0, 0.0, 2.0, 2.0, 3.0])

    def test_single_bit_has_two_levels(self):
        spec = QuantSpec(1, -1.0, 1.0)
        self.assertEqual(set(quantize(np.linspace(-2, 2, 9), spec)), {-1.0, 1.0})

    def test_invalid_range(self):
        with self.assertRaises(ValueError):
            QuantSpec(4, 1.0, 1.0)
        with self.assertRaises(ValueError):
            QuantSpec(0, 0.0, 1.0)

    def test_fitted_range_beats_min_max(self):
        weights = np.random.default_rng(8).standard_normal(500)
        for q in (2, 4):
            fitted = fit_quant_range(weights, q)
            naive = QuantSpec(q, float(weights.min()), float(weights.max()))
            self.assertLessEqual(quantization_error(weights, fitted), quantization_error(weights, naive) + 1e-12)

    def test_more_bits_never_hurt(self):
        weights = np.random.default_rng(9).standard_normal(300)
        error_4 = quantization_error(weights, fit_quant_range(weights, 4))
        error_8 = quantization_error(weights, fit_quant_range(weights, 8))
        self.assertLessEqual(error_8, error_4)

    def test_constant_tensor_gives_degenerate_range(self):
        with self.assertLogs('offload.ecld', level='WARNING'):
            spec = fit_quant_range(np.full(5, 0.25), 4)
        self.assertTrue(spec.degenerate)
        np.testing.assert_allclose(quantize(np.full(5, 0.25), spec), 0.25)


class OfflineMetricTests(SimpleTestCase):
    def test_fixture_corpora(self):
        predictions, references = split_accuracy_records(read_jsonl(settings.EDGEFLOCK['ACCURACY_CORPUS']))
        self.assertAlmostEqual(offline_accuracy(predictions, references), 0.7)
        self.assertAlmostEqual(offline_hallucination(read_jsonl(settings.EDGEFLOCK['HALLUCINATION_CORPUS'])), 1 / 3)

    def test_accuracy_is_case_insensitive_containment(self):
        predictions = [{'id': 1, 'prediction': 'It is PARIS.'}, {'id': 2, 'prediction': 'No idea'}]
        references = [{'id': 1, 'answer': 'Paris'}, {'id': 2, 'answer': 'Rome'}]
        self.assertEqual(offline_accuracy(predictions, references), 0.5)

    def test_accuracy_rejects_mismatched_ids(self):
        with self.assertRaises(ValueError):
            offline_accuracy([{'id': 1, 'prediction': 'a'}], [{'id': 2, 'answer': 'a'}])

    def test_hallucination_pools_sentences(self):
        articles = [{'article_id': 'a', 'labels': [1, 1, 1]}, {'article_id': 'b', 'labels': [0]}]
        self.assertAlmostEqual(offline_hallucination(articles), 0.25)

    def test_hallucination_rejects_empty_input(self):
        with self.assertRaises(ValueError):
            offline_hallucination([])
        with self.assertRaises(ValueError):
            offline_hallucination([{'article_id': 'a', 'labels': []}])


def zeroed_output_change(net, calibration, zero):
    """Mean |delta logits| after zeroing weights in a copy of net; zero(params) edits in place."""
    pruned = net.copy()
    zero(pruned.params)
    return float(np.mean(np.abs(pruned(calibration) - net(calibration))))


class ImportanceOracleTests(SimpleTestCase):
    def setUp(self):
        self.net = ToyNetwork(SMALL, rng=np.random.default_rng(20))
        self.calibration = np.random.default_rng(21).standard_normal((16, SMALL.n_in))

    def test_scores_match_weight_zeroing(self):
        scores = compute_importance(self.net, self.calibration)
        size = SMALL.head_size
        for layer in range(SMALL.n_layers):
            def drop_layer(p, layer=layer):
                p[f'W_out{layer}'][:] = 0.0
            self.assertAlmostEqual(scores.layer[layer], zeroed_output_change(self.net, self.calibration, drop_layer), places=12)
            for unit in range(SMALL.n_units):
                def drop_unit(p, layer=layer, unit=unit):
                    p[f'W_out{layer}'][unit] = 0.0
                np.testing.assert_allclose(
                    scores.neuron[layer, unit], zeroed_output_change(self.net, self.calibration, drop_unit),
                    rtol=1e-12, atol=1e-15,
                )
            for head in range(SMALL.n_heads):
                def drop_head(p, layer=layer, head=head):
                    p[f'W_out{layer}'][head * size:(head + 1) * size] = 0.0
                np.testing.assert_allclose(
                    scores.head[layer, head], zeroed_output_change(self.net, self.calibration, drop_head),
                    rtol=1e-12, atol=1e-15,
                )
        for column in range(SMALL.n_embed):
            def drop_embed(p, column=column):
                p['embed'][:, column] = 0.0
                for layer in range(SMALL.n_layers):
                    p[f'W_out{layer}'][:, column] = 0.0
            np.testing.assert_allclose(
                scores.embed[column], zeroed_output_change(self.net, self.calibration, drop_embed),
                rtol=1e-12, atol=1e-15,
            )

    def test_duplicated_neurons_score_alike(self):
        p = self.net.params
        p['W_in0'][:, 1] = p['W_in0'][:, 0]
        p['b_in0'][1] = p['b_in0'][0]
        p['W_out0'][1] = p['W_out0'][0]
        scores = compute_importance(self.net, self.calibration)
        np.testing.assert_allclose(scores.neuron[0, 1], scores.neuron[0, 0], rtol=1e-12)

    def test_scores_are_deterministic(self):
        first = compute_importance(self.net, self.calibration)
        second = compute_importance(self.net, self.calibration)
        np.testing.assert_array_equal(first.neuron, second.neuron)
        np.testing.assert_array_equal(first.embed, second.embed)


class MaskCompositionTests(SimpleTestCase):
    def test_combined_is_width_times_depth_on_random_draws(self):
        rng = np.random.default_rng(30)
        for _ in range(1000):
            scores = ImportanceScores(
                layer=rng.uniform(size=SMALL.n_layers),
                neuron=rng.uniform(size=(SMALL.n_layers, SMALL.n_units)),
                head=rng.uniform(size=(SMALL.n_layers, SMALL.n_heads)),
                embed=rng.uniform(size=SMALL.n_embed),
                spec=SMALL,
            )
            theta, theta_depth = rng.uniform(size=2)
            mask = build_masks(scores, theta, theta_depth)
            depth = (scores.layer >= theta_depth).astype(float)
            for name, width in mask.width.items():
                layer = int(name[-1]) if name[-1].isdigit() else None
                expected = width if layer is None else width * depth[layer]
                np.testing.assert_array_equal(mask.combined[name], expected, err_msg=name)
            self.assertLessEqual(mask.popcount(), mask.popcount('width'))
            self.assertLessEqual(mask.popcount(), mask.depth_popcount(SMALL))


class QuantizeOracleTests(SimpleTestCase):
    def random_specs(self, rng, count):
        for _ in range(count):
            q = int(rng.choice([1, 2, 4, 8]))
            a = float(rng.uniform(-2.0, 0.0))
            b = a + float(rng.uniform(0.1, 3.0))
            yield QuantSpec(q, a, b)

    def test_quantize_is_idempotent(self):
        rng = np.random.default_rng(40)
        for spec in self.random_specs(rng, 500):
            weights = rng.standard_normal(50) * 2.0
            once = quantize(weights, spec)
            np.testing.assert_array_equal(quantize(once, spec), once)

    def test_outputs_lie_on_the_lattice(self):
        rng = np.random.default_rng(41)
        for spec in self.random_specs(rng, 500):
            levels = (quantize(rng.standard_normal(50) * 2.0, spec) - spec.a) / spec.step
            np.testing.assert_allclose(levels, np.round(levels), atol=1e-9)
            self.assertTrue(np.all(np.round(levels) >= 0))
            self.assertTrue(np.all(np.round(levels) <= spec.levels))

    def test_scalar_oracle(self):
        rng = np.random.default_rng(42)
        for spec in self.random_specs(rng, 100):
            w = float(rng.standard_normal() * 2.0)
            step = (spec.b - spec.a) / (2 ** spec.bit_width - 1)
            clamped = min(max(w, spec.a), spec.b)
            expected = round((clamped - spec.a) / step) * step + spec.a
            self.assertAlmostEqual(float(quantize(w, spec)), expected, delta=1e-12 * max(1.0, abs(expected)))

    def test_fitted_range_beats_min_max_on_random_tensors(self):
        rng = np.random.default_rng(43)
        for _ in range(50):
            weights = rng.standard_normal(int(rng.integers(20, 200))) * rng.uniform(0.1, 3.0)
            q = int(rng.choice([1, 2, 4, 8]))
            naive = QuantSpec(q, float(weights.min()), float(weights.max()))
            fitted = fit_quant_range(weights, q, grid=8)
            self.assertLessEqual(quantization_error(weights, fitted), quantization_error(weights, naive) + 1e-12)


class DistillOracleTests(SimpleTestCase):
    def test_loss_matches_scalar_oracle(self):
        rng = np.random.default_rng(50)
        for _ in range(100):
            classes = int(rng.integers(2, 6))
            student, teacher = rng.standard_normal((2, classes)) * 2.0
            label = int(rng.integers(classes))
            cfg = DistillConfig(alpha=float(rng.uniform()), tau=float(rng.uniform(0.5, 5.0)))

            def log_softmax_row(row, tau):
                peak = max(row)
                total = sum(math.exp((value - peak) / tau) for value in row)
                return [(value - peak) / tau - math.log(total) for value in row]

            ce = -log_softmax_row(student, 1.0)[label]
            log_pt, log_ps = log_softmax_row(teacher, cfg.tau), log_softmax_row(student, cfg.tau)
            kl = sum(math.exp(t) * (t - s) for t, s in zip(log_pt, log_ps))
            expected = (1.0 - cfg.alpha) * ce + cfg.alpha * kl
            loss = distill_loss(student[None, :], teacher[None, :], np.eye(classes)[[label]], cfg)
            self.assertGreaterEqual(loss, 0.0)
            self.assertAlmostEqual(loss, expected, delta=1e-12 * max(1.0, abs(expected)))


class OfflineMetricOracleTests(SimpleTestCase):
    def test_hallucination_matches_sentence_count(self):
        rng = np.random.default_rng(60)
        for _ in range(100):
            articles = [
                {'article_id': n, 'labels': [int(v) for v in rng.integers(0, 2, size=int(rng.integers(1, 8)))]}
                for n in range(int(rng.integers(1, 6)))
            ]
            labels = [label for article in articles for label in article['labels']]
            expected = labels.count(0) / len(labels)
            self.assertAlmostEqual(offline_hallucination(articles), expected, delta=1e-12)

    def test_accuracy_matches_containment_count(self):
        rng = np.random.default_rng(61)
        words = ['paris', 'rome', 'oslo', 'lima', 'kyiv']
        for _ in range(100):
            count = int(rng.integers(1, 10))
            answers = [words[int(i)] for i in rng.integers(0, len(words), size=count)]
            guesses = [words[int(i)] for i in rng.integers(0, len(words), size=count)]
            predictions = [{'id': n, 'prediction': f'It is {g.upper()}.'} for n, g in enumerate(guesses)]
            references = [{'id': n, 'answer': a.title()} for n, a in enumerate(answers)]
            expected = sum(a == g for a, g in zip(answers, guesses)) / count
            self.assertAlmostEqual(offline_accuracy(predictions, references), expected, delta=1e-12)
