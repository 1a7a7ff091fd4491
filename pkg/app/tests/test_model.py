"""
Tests for the model service.
"""

import itertools
import math
import os
import sys
import unittest
from dataclasses import replace

import numpy as np

# Add the repository root to the path so we can import the app package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from app.services.geometry import box_sizes
from app.services.graph import build_spatial_bundle
from app.services.model import (
    KnnFormer,
    ModelInputs,
    attention_output,
    attention_scores,
    init_params,
    layer_view,
    param_count,
)
from app.services.numerics import Tensor, cross_entropy, row_softmax
from app.tests.helpers import gradient_error, point_document, random_document
from app.utils.config import ModelConfig
from app.utils.errors import CheckpointIncompatibleError, InvalidShapeError

TINY = ModelConfig(
    layers=1,
    heads=2,
    hidden=8,
    ffn_ratio=2,
    k=2,
    hop_threshold=1,
    max_hop_bucket=2,
    num_classes=4,
    text_dim=8,
    size_dim=4,
    init_std=0.5,
)


def inputs_for(doc, config, rng):
    return ModelInputs(text=rng.normal(size=(len(doc.entities), config.text_dim)), sizes=box_sizes(doc))


def oracle_scores(x, p, buckets, sigma, mask, config):
    """Attention logits written out pair by pair."""
    n, heads, d = x.shape[0], config.heads, config.head_dim
    q = (x @ p['attn.wq'].data).reshape(n, heads, d)
    k = (x @ p['attn.wk'].data).reshape(n, heads, d)
    scores = np.full((heads, n, n), -np.inf)
    for h, i, j in itertools.product(range(heads), range(n), range(n)):
        if not mask[i, j]:
            continue
        key = k[j, h] if config.p2c_uses_query_row else k[i, h]
        total = q[i, h] @ k[j, h]
        if config.use_hop_bias:
            b = buckets[i, j]
            total += q[i, h] @ p['hop.q'].data[h, b] + key @ p['hop.k'].data[h, b]
        if config.use_sigma_bias:
            rq = sigma[i, j] @ p['sigma.q.w'].data[h] + p['sigma.q.b'].data[h]
            rk = sigma[i, j] @ p['sigma.k.w'].data[h] + p['sigma.k.b'].data[h]
            total += q[i, h] @ rq + key @ rk
        scores[h, i, j] = total / math.sqrt(d)
    return scores


def oracle_output(a, x, p, buckets, sigma, config):
    """Attention output written out pair by pair."""
    n, heads, d = x.shape[0], config.heads, config.head_dim
    v = (x @ p['attn.wv'].data).reshape(n, heads, d)
    z = np.zeros((n, heads, d))
    for h, i, j in itertools.product(range(heads), range(n), range(n)):
        value = v[j, h].copy()
        if config.use_hop_bias:
            value += p['hop.v'].data[h, buckets[i, j]]
        if config.use_sigma_bias:
            value += sigma[i, j] @ p['sigma.v.w'].data[h] + p['sigma.v.b'].data[h]
        z[i, h] += a[h, i, j] * value
    return z.reshape(n, config.hidden) @ p['attn.wo'].data + p['attn.bo'].data


class TestParameters(unittest.TestCase):
    """Test cases for parameter layout."""

    def test_default_count(self):
        """The default configuration stays in the few-hundred-thousand range."""
        count = param_count(ModelConfig())
        self.assertEqual(count, 464936)
        self.assertTrue(300_000 <= count <= 700_000)

    def test_count_matches_model(self):
        model = KnnFormer(TINY)
        self.assertEqual(model.num_parameters(), param_count(TINY))

    def test_shared_bias(self):
        """Sharing the spatial biases keeps one copy for all layers."""
        config = replace(TINY, layers=3)
        shared = replace(config, share_spatial_bias=True)
        self.assertLess(param_count(shared), param_count(config))
        self.assertTrue(any(name.startswith('shared.bias') for name in init_params(shared)))

    def test_deterministic_init(self):
        """The same seed gives the same parameters."""
        a, b = init_params(TINY, seed=3), init_params(TINY, seed=3)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)


class TestAttention(unittest.TestCase):
    """Attention scores and outputs against pair-by-pair oracles."""

    def check_instances(self, config, count, seed):
        rng = np.random.default_rng(seed)
        params = init_params(config, seed)
        p = layer_view(params, config, 0)
        for _ in range(count):
            n = int(rng.integers(2, 9))
            bundle = build_spatial_bundle(random_document(rng, n), config)
            x = rng.normal(size=(n, config.hidden))

            scores = attention_scores(Tensor(x), p, bundle.buckets, bundle.sigma, bundle.mask, config)
            expected = oracle_scores(x, p, bundle.buckets, bundle.sigma, bundle.mask, config)
            np.testing.assert_array_equal(np.isinf(scores.data), np.isinf(expected))
            finite = np.isfinite(expected)
            np.testing.assert_allclose(scores.data[finite], expected[finite], rtol=1e-9, atol=1e-9)

            a = row_softmax(scores, bundle.mask[None])
            out = attention_output(a, Tensor(x), p, bundle.buckets, bundle.sigma, config)
            np.testing.assert_allclose(out.data, oracle_output(a.data, x, p, bundle.buckets, bundle.sigma, config),
                                       rtol=1e-9, atol=1e-9)

    def test_oracle(self):
        """Scores and outputs match the oracle on 50 random documents."""
        self.check_instances(TINY, 50, 0)

    def test_oracle_query_row_keys(self):
        """The alternative position-to-content indexing also matches."""
        self.check_instances(replace(TINY, p2c_uses_query_row=True), 10, 1)

    def test_oracle_without_biases(self):
        """Plain attention when both spatial biases are off."""
        self.check_instances(replace(TINY, use_hop_bias=False, use_sigma_bias=False), 10, 2)

    def test_oracle_sincos(self):
        self.check_instances(replace(TINY, sigma_encoding='sincos'), 10, 3)

    def test_bad_shapes(self):
        """Pairwise inputs must match the number of entities."""
        p = layer_view(init_params(TINY), TINY, 0)
        with self.assertRaises(InvalidShapeError):
            attention_scores(Tensor(np.zeros((3, 8))), p, np.zeros((2, 2), dtype=int),
                             np.zeros((2, 2, 2)), np.ones((2, 2), dtype=bool), TINY)


class TestForward(unittest.TestCase):
    """Test cases for the full forward pass."""

    def test_mask_exactness(self):
        """With one layer, an entity's logits ignore every entity outside its hop radius."""
        rng = np.random.default_rng(5)
        model = KnnFormer(TINY, seed=1)
        checked = 0
        for d in range(20):
            doc = random_document(rng, 10, doc_id=f"d{d}")
            bundle = build_spatial_bundle(doc, TINY)
            inputs = inputs_for(doc, TINY, rng)
            base = model.predict_proba(inputs, bundle)
            for i in range(10):
                outside = np.flatnonzero(~bundle.mask[i])
                if not len(outside):
                    continue
                text = inputs.text.copy()
                text[outside] = rng.normal(size=(len(outside), TINY.text_dim)) * 5.0
                moved = model.predict_proba(ModelInputs(text=text, sizes=inputs.sizes), bundle)
                np.testing.assert_allclose(moved[i], base[i], rtol=0, atol=1e-12)
                checked += 1
        self.assertGreater(checked, 0)

    def test_permutation_equivariance(self):
        """Permuting the entities permutes the logits."""
        rng = np.random.default_rng(6)
        config = replace(TINY, layers=2)
        model = KnnFormer(config, seed=2)
        for _ in range(5):
            doc = random_document(rng, 9)
            bundle = build_spatial_bundle(doc, config)
            inputs = inputs_for(doc, config, rng)
            order = rng.permutation(9)
            logits = model.forward(inputs, bundle).data
            moved = model.forward(inputs.permuted(order), bundle.permuted(order)).data
            np.testing.assert_allclose(moved, logits[order], rtol=1e-10, atol=1e-10)

    def test_gradients_for_every_flag_combination(self):
        """Reverse-mode gradients agree with finite differences under all ablations."""
        rng = np.random.default_rng(7)
        flags = ('use_hop_bias', 'use_local_mask', 'use_sigma_bias', 'use_abs_pos')
        for values in itertools.product((True, False), repeat=len(flags)):
            config = replace(TINY, k=1, **dict(zip(flags, values)))
            model = KnnFormer(config, seed=3)
            doc = random_document(rng, 5)
            bundle = build_spatial_bundle(doc, config)
            inputs = inputs_for(doc, config, rng)
            targets = rng.integers(0, config.num_classes, size=5)

            error = gradient_error(
                lambda: cross_entropy(model.forward(inputs, bundle), targets),
                list(model.parameters().values()),
                rng=rng,
                max_entries=3,
            )
            with self.subTest(flags=values):
                self.assertLess(error, 1e-5)

    def test_zero_hop_tables(self):
        """Zeroed hop tables reproduce the model without hop bias bit for bit."""
        rng = np.random.default_rng(8)
        full = KnnFormer(TINY, seed=4)
        for name, tensor in full.parameters().items():
            if '.hop.' in name:
                tensor.data[...] = 0.0
        plain = KnnFormer(replace(TINY, use_hop_bias=False), seed=4)
        plain.load_state_dict({
            name: value for name, value in full.state_dict().items() if '.hop.' not in name
        })

        doc = random_document(rng, 8)
        bundle = build_spatial_bundle(doc, TINY)
        inputs = inputs_for(doc, TINY, rng)
        np.testing.assert_array_equal(full.forward(inputs, bundle).data, plain.forward(inputs, bundle).data)

    def test_unbounded_threshold(self):
        """On a connected graph an unbounded hop radius equals global attention bit for bit."""
        rng = np.random.default_rng(9)
        doc = point_document([(0.1 * i, 0.5) for i in range(1, 8)])
        local = replace(TINY, hop_threshold=None)
        bundle = build_spatial_bundle(doc, local)
        self.assertTrue(bundle.mask.all())

        model = KnnFormer(local, seed=5)
        inputs = inputs_for(doc, local, rng)
        global_config = replace(local, use_local_mask=False)
        other = KnnFormer(global_config, seed=5)
        np.testing.assert_array_equal(
            model.forward(inputs, bundle).data,
            other.forward(inputs, build_spatial_bundle(doc, global_config)).data,
        )

    def test_predict_proba(self):
        """Probabilities are non-negative and sum to one per entity."""
        rng = np.random.default_rng(10)
        model = KnnFormer(TINY)
        doc = random_document(rng, 6)
        probs = model.predict_proba(inputs_for(doc, TINY, rng), build_spatial_bundle(doc, TINY))
        self.assertEqual(probs.shape, (6, TINY.num_classes))
        self.assertTrue((probs >= 0).all())
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_single_entity(self):
        """A one-entity document still yields one row of logits."""
        rng = np.random.default_rng(11)
        model = KnnFormer(TINY)
        doc = random_document(rng, 1)
        logits = model.forward(inputs_for(doc, TINY, rng), build_spatial_bundle(doc, TINY))
        self.assertEqual(logits.shape, (1, TINY.num_classes))

    def test_mismatched_inputs(self):
        rng = np.random.default_rng(12)
        model = KnnFormer(TINY)
        bundle = build_spatial_bundle(random_document(rng, 4), TINY)
        with self.assertRaises(InvalidShapeError):
            model.forward(inputs_for(random_document(rng, 5), TINY, rng), bundle)


class TestStateDict(unittest.TestCase):
    """Test cases for loading and exporting parameters."""

    def test_round_trip(self):
        a, b = KnnFormer(TINY, seed=0), KnnFormer(TINY, seed=1)
        b.load_state_dict(a.state_dict())
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(b.parameters()[name].data, value)

    def test_missing_tensor(self):
        state = KnnFormer(TINY).state_dict()
        state.pop('head.w')
        with self.assertRaises(CheckpointIncompatibleError):
            KnnFormer(TINY).load_state_dict(state)

    def test_wrong_shape(self):
        state = KnnFormer(TINY).state_dict()
        state['head.w'] = np.zeros((3, 3))
        with self.assertRaises(CheckpointIncompatibleError):
            KnnFormer(TINY).load_state_dict(state)


if __name__ == '__main__':
    unittest.main()
