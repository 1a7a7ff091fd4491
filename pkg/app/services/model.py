"""
Model service for the entity classification package.

A stack of pre-norm transformer layers whose attention adds two pairwise
biases to the usual query/key/value terms:

    e_ij = [ q_i . (k_j + HQ[phi_ij] + RQ(sigma_ij)) + (HK[phi_ij] + RK(sigma_ij)) . k_i ] / sqrt(d)
    a_ij = softmax_j(e_ij) over pairs allowed by the hop mask
    z_i  = sum_j a_ij (v_j + HV[phi_ij] + RV(sigma_ij))

with q = xW^Q, k = xW^K, v = xW^V per head, H hop-bucket lookup tables and
R affine maps of the pairwise [distance, angle] features.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from app.services.embedder import init_embedder_params, input_embedding
from app.services.numerics import (
    add,
    einsum,
    embedding_lookup,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    no_grad,
    parameter,
    reshape,
    row_softmax,
    scale,
    softmax_array,
)
from app.utils.errors import CheckpointIncompatibleError, InvalidShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelInputs:
    """Per-document model inputs: frozen text embeddings and box sizes."""

    text: np.ndarray
    sizes: np.ndarray

    @property
    def n(self):
        return self.text.shape[0]

    def permuted(self, order):
        return ModelInputs(text=self.text[order], sizes=self.sizes[order])


def _bias_prefix(config, layer):
    return 'shared.bias' if config.share_spatial_bias else f"layers.{layer}.bias"


def _bias_shapes(config):
    h, d, f = config.heads, config.head_dim, config.sigma_dim
    shapes = {}
    if config.use_hop_bias:
        for part in ('q', 'k', 'v'):
            shapes[f"hop.{part}"] = (h, config.num_hop_buckets, d)
    if config.use_sigma_bias:
        for part in ('q', 'k', 'v'):
            shapes[f"sigma.{part}.w"] = (h, f, d)
            shapes[f"sigma.{part}.b"] = (h, d)
    return shapes


def _layer_shapes(config):
    hidden, inner = config.hidden, config.ffn_ratio * config.hidden
    return {
        'ln1.g': (hidden,),
        'ln1.b': (hidden,),
        'attn.wq': (hidden, hidden),
        'attn.wk': (hidden, hidden),
        'attn.wv': (hidden, hidden),
        'attn.wo': (hidden, hidden),
        'attn.bo': (hidden,),
        'ln2.g': (hidden,),
        'ln2.b': (hidden,),
        'ffn.w1': (hidden, inner),
        'ffn.b1': (inner,),
        'ffn.w2': (inner, hidden),
        'ffn.b2': (hidden,),
    }


def param_shapes(config):
    """Ordered name -> shape of every trainable tensor for a config."""
    shapes = {
        'embed.size.w': (2, config.size_dim),
        'embed.size.b': (config.size_dim,),
        'embed.proj.w': (config.text_dim + config.size_dim, config.hidden),
        'embed.proj.b': (config.hidden,),
    }
    if config.use_abs_pos:
        shapes['abs.x'] = (config.abs_pos_buckets, config.hidden)
        shapes['abs.y'] = (config.abs_pos_buckets, config.hidden)
    if config.share_spatial_bias and config.layers > 0:
        for name, shape in _bias_shapes(config).items():
            shapes[f"shared.bias.{name}"] = shape
    for layer in range(config.layers):
        for name, shape in _layer_shapes(config).items():
            shapes[f"layers.{layer}.{name}"] = shape
        if not config.share_spatial_bias:
            for name, shape in _bias_shapes(config).items():
                shapes[f"layers.{layer}.bias.{name}"] = shape
    shapes['head.ln.g'] = (config.hidden,)
    shapes['head.ln.b'] = (config.hidden,)
    shapes['head.w'] = (config.hidden, config.num_classes)
    shapes['head.b'] = (config.num_classes,)
    return shapes


def param_count(config):
    """
    Exact number of trainable scalars for a config.

    Args:
        config (ModelConfig): Architecture

    Returns:
        int: Parameter count
    """
    config.validate()
    return int(sum(int(np.prod(shape)) for shape in param_shapes(config).values()))


def _init_value(name, shape, rng, std):
    leaf = name.rsplit('.', 1)[-1]
    if leaf == 'g':
        return np.ones(shape)
    if name.endswith('.b') or leaf in ('bo', 'b1', 'b2'):
        return np.zeros(shape)
    return rng.normal(0.0, std, shape)


def init_params(config, seed=0):
    """Create freshly initialized parameters in a deterministic order."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = init_embedder_params(config.text_dim, config.size_dim, config.hidden, rng, dtype, config.init_std)
    for name, shape in param_shapes(config).items():
        if name in params:
            continue
        params[name] = parameter(_init_value(name, shape, rng, config.init_std), name, dtype)
    return params


def layer_view(params, config, layer):
    """Short-named view of one layer's tensors, spatial biases included."""
    view = {}
    prefix = f"layers.{layer}."
    for name in _layer_shapes(config):
        view[name] = params[prefix + name]
    bias_prefix = _bias_prefix(config, layer)
    for name in _bias_shapes(config):
        view[name] = params[f"{bias_prefix}.{name}"]
    return view


def _heads(x, config):
    return reshape(x, (x.shape[0], config.heads, config.head_dim))


def hop_one_hot(buckets, config, dtype=np.float64):
    """N x N x B one-hot encoding of hop buckets, used to gather table scores."""
    return np.eye(config.num_hop_buckets, dtype=dtype)[np.asarray(buckets)]


def attention_scores(x, p, buckets, sigma, mask, config):
    """
    Attention logits e for every head.

    Args:
        x (Tensor): N x hidden layer input
        p (dict): Layer view (see layer_view)
        buckets (np.ndarray): N x N hop bucket indices
        sigma (np.ndarray): N x N x F pairwise features
        mask (np.ndarray): N x N allowed pairs
        config (ModelConfig): Flags and sizes

    Returns:
        Tensor: heads x N x N scores; disallowed pairs hold -inf
    """
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != config.hidden:
        raise InvalidShapeError(f"attention_scores: input {x.shape}, expected (N, {config.hidden})")
    if np.shape(buckets) != (n, n) or np.shape(mask) != (n, n) or np.shape(sigma)[:2] != (n, n):
        raise InvalidShapeError(f"attention_scores: pairwise inputs do not match N={n}")

    q = _heads(matmul(x, p['attn.wq']), config)
    k = _heads(matmul(x, p['attn.wk']), config)
    scores = einsum('ihd,jhd->hij', q, k)
    key_row = 'j' if config.p2c_uses_query_row else 'i'

    if config.use_hop_bias:
        one_hot = hop_one_hot(buckets, config, x.dtype)
        c2p = einsum('hib,ijb->hij', einsum('ihd,hbd->hib', q, p['hop.q']), one_hot)
        key_table = einsum(f"{key_row}hd,hbd->h{key_row}b", k, p['hop.k'])
        p2c = einsum(f"h{key_row}b,ijb->hij", key_table, one_hot)
        scores = add(scores, add(c2p, p2c))

    if config.use_sigma_bias:
        sigma = np.asarray(sigma, dtype=x.dtype)
        c2p = einsum('hif,ijf->hij', einsum('ihd,hfd->hif', q, p['sigma.q.w']), sigma)
        c2p = add(c2p, reshape(einsum('ihd,hd->hi', q, p['sigma.q.b']), (config.heads, n, 1)))
        key_feat = einsum(f"{key_row}hd,hfd->h{key_row}f", k, p['sigma.k.w'])
        p2c = einsum(f"h{key_row}f,ijf->hij", key_feat, sigma)
        key_bias = einsum(f"{key_row}hd,hd->h{key_row}", k, p['sigma.k.b'])
        bias_shape = (config.heads, n, 1) if key_row == 'i' else (config.heads, 1, n)
        p2c = add(p2c, reshape(key_bias, bias_shape))
        scores = add(scores, add(c2p, p2c))

    scores = scale(scores, 1.0 / math.sqrt(config.head_dim))
    return masked_fill(scores, np.asarray(mask, dtype=bool)[None, :, :])


def attention_values(a, x, p, buckets, sigma, config):
    """
    Per-head weighted sums z_i = sum_j a_ij (v_j + HV[phi_ij] + RV(sigma_ij)).

    Returns:
        Tensor: N x heads x head_dim
    """
    v = _heads(matmul(x, p['attn.wv']), config)
    z = einsum('hij,jhd->ihd', a, v)

    if config.use_hop_bias:
        one_hot = hop_one_hot(buckets, config, x.dtype)
        weights = einsum('hij,ijb->hib', a, one_hot)
        z = add(z, einsum('hib,hbd->ihd', weights, p['hop.v']))

    if config.use_sigma_bias:
        sigma = np.asarray(sigma, dtype=x.dtype)
        mixed = einsum('hij,ijf->hif', a, sigma)
        z = add(z, einsum('hif,hfd->ihd', mixed, p['sigma.v.w']))
        z = add(z, einsum('hij,hd->ihd', a, p['sigma.v.b']))

    return z


def attention_output(a, x, p, buckets, sigma, config):
    """Concatenate the heads of attention_values and apply the output projection."""
    z = attention_values(a, x, p, buckets, sigma, config)
    z = reshape(z, (x.shape[0], config.hidden))
    return add(matmul(z, p['attn.wo']), p['attn.bo'])


def position_buckets(centers, buckets):
    """Quantize normalized box centres into `buckets` cells per axis."""
    index = np.floor(np.asarray(centers) * buckets).astype(np.int64)
    return np.clip(index, 0, buckets - 1)


def transformer_forward(params, inputs, bundle, config):
    """
    Full forward pass to per-entity class logits.

    Args:
        params (dict): Model parameters
        inputs (ModelInputs): Text embeddings and box sizes
        bundle (SpatialBundle): Pairwise features, hop buckets and mask
        config (ModelConfig): Architecture and flags

    Returns:
        Tensor: N x num_classes logits
    """
    if inputs.n != bundle.n:
        raise InvalidShapeError(f"Inputs have {inputs.n} entities, spatial bundle has {bundle.n}")

    x = input_embedding(inputs.text, inputs.sizes, params)
    if config.use_abs_pos:
        cells = position_buckets(bundle.centers, config.abs_pos_buckets)
        x = add(x, embedding_lookup(params['abs.x'], cells[:, 0]))
        x = add(x, embedding_lookup(params['abs.y'], cells[:, 1]))

    if config.use_local_mask:
        mask = bundle.mask
    else:
        mask = np.ones((bundle.n, bundle.n), dtype=bool)

    for layer in range(config.layers):
        p = layer_view(params, config, layer)
        h = layer_norm(x, p['ln1.g'], p['ln1.b'], config.ln_eps)
        scores = attention_scores(h, p, bundle.buckets, bundle.sigma, mask, config)
        a = row_softmax(scores, mask[None, :, :])
        x = add(x, attention_output(a, h, p, bundle.buckets, bundle.sigma, config))

        h = layer_norm(x, p['ln2.g'], p['ln2.b'], config.ln_eps)
        inner = gelu(add(matmul(h, p['ffn.w1']), p['ffn.b1']))
        x = add(x, add(matmul(inner, p['ffn.w2']), p['ffn.b2']))

    x = layer_norm(x, params['head.ln.g'], params['head.ln.b'], config.ln_eps)
    return add(matmul(x, params['head.w']), params['head.b'])


class KnnFormer:
    """
    Entity classifier with hop-distance and distance/angle biased attention.

    Owns the named parameters; forward passes over distinct documents may run
    concurrently as long as nothing mutates the parameters meanwhile.
    """

    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.params = init_params(config, seed)

    def parameters(self):
        return self.params

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, inputs, bundle):
        return transformer_forward(self.params, inputs, bundle, self.config)

    def predict_proba(self, inputs, bundle):
        """Class probabilities without recording a tape."""
        with no_grad():
            logits = self.forward(inputs, bundle)
        return softmax_array(logits.data)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays):
        """
        Replace parameter values.

        Raises:
            CheckpointIncompatibleError: On missing, extra or mis-shaped tensors
        """
        expected = set(self.params)
        given = set(arrays)
        if expected != given:
            missing = sorted(expected - given)[:5]
            extra = sorted(given - expected)[:5]
            raise CheckpointIncompatibleError(
                f"Checkpoint tensors do not match the config (missing {missing}, unexpected {extra})"
            )
        for name, value in arrays.items():
            value = np.asarray(value)
            if value.shape != self.params[name].shape:
                raise CheckpointIncompatibleError(
                    f"Tensor {name} has shape {value.shape}, config expects {self.params[name].shape}"
                )
        for name, value in arrays.items():
            self.params[name].data = np.array(value, dtype=self.params[name].dtype)
            self.params[name].zero_grad()
