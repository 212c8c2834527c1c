"""
Compression math for compact LLM variants: importance scoring, pruning masks, distillation
loss, affine quantization and offline QoS metrics.

Everything operates on the small residual ToyNetwork below, which groups hidden units into
heads and exposes embedding, neuron, head and layer components for scoring.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .nn import Module, as_batch, uniform_fan_in

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantProfile:
    """Offline profile of one model variant (one row of the catalog)."""
    name: str
    offline_accuracy: float
    offline_hallucination: float
    storage_mb: float
    energy_wh: float
    family: str = ''
    method: str = ''

    def __post_init__(self):
        for attr in ('offline_accuracy', 'offline_hallucination'):
            value = getattr(self, attr)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f'{self.name}: {attr} must lie in [0, 1], got {value}')
        if self.storage_mb <= 0 or self.energy_wh <= 0:
            raise ValueError(f'{self.name}: storage_mb and energy_wh must be positive')

    def to_dict(self):
        data = asdict(self)
        data.pop('name')
        return data


def load_catalog(path):
    """Read a profile catalog (JSON object keyed by variant name)."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or not raw:
        raise ValueError(f'{path}: catalog must be a non-empty JSON object')
    try:
        return {name: VariantProfile(name=name, **fields) for name, fields in raw.items()}
    except TypeError as exc:
        raise ValueError(f'{path}: malformed profile entry ({exc})') from exc


def dump_catalog(profiles):
    return json.dumps({p.name: p.to_dict() for p in profiles}, indent=2, sort_keys=True) + '\n'


@dataclass(frozen=True)
class ToyNetSpec:
    """Residual two-block network standing in for a transformer."""
    n_in: int = 16
    n_embed: int = 16
    n_layers: int = 2
    n_heads: int = 4
    head_size: int = 8
    n_classes: int = 4

    @property
    def n_units(self):
        return self.n_heads * self.head_size


@dataclass
class ToyCache:
    x: np.ndarray
    embed_gate: np.ndarray
    layer_gate: np.ndarray
    unit_gate: np.ndarray
    streams: list = field(default_factory=list)
    hidden: list = field(default_factory=list)


class ToyNetwork(Module):
    """
    e = (x @ embed) * g_embed
    block l: a_l = tanh(h @ W_in{l} + b_in{l}) * g_unit[l];  h <- h + g_layer[l] * (a_l @ W_out{l}) * g_embed
    logits = h @ classifier

    The gates exist only for leave-one-out scoring; pruning masks act on the weights.
    """

    def __init__(self, spec=ToyNetSpec(), rng=None, scale=1.0):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params['embed'] = scale * uniform_fan_in(rng, spec.n_in, (spec.n_in, spec.n_embed))
        for layer in range(spec.n_layers):
            self.params[f'W_in{layer}'] = scale * uniform_fan_in(rng, spec.n_embed, (spec.n_embed, spec.n_units))
            self.params[f'b_in{layer}'] = np.zeros(spec.n_units)
            self.params[f'W_out{layer}'] = scale * uniform_fan_in(rng, spec.n_units, (spec.n_units, spec.n_embed))
        self.params['classifier'] = scale * uniform_fan_in(rng, spec.n_embed, (spec.n_embed, spec.n_classes))

    def copy(self):
        clone = ToyNetwork(self.spec)
        clone.load_state_dict(self.state_dict())
        return clone

    def forward(self, x, embed_gate=None, unit_gate=None, layer_gate=None):
        spec = self.spec
        x = as_batch(x, spec.n_in, 'calibration input')
        embed_gate = np.ones(spec.n_embed) if embed_gate is None else embed_gate
        unit_gate = np.ones((spec.n_layers, spec.n_units)) if unit_gate is None else unit_gate
        layer_gate = np.ones(spec.n_layers) if layer_gate is None else layer_gate
        cache = ToyCache(x=x, embed_gate=embed_gate, layer_gate=layer_gate, unit_gate=unit_gate)
        h = (x @ self.params['embed']) * embed_gate
        for layer in range(spec.n_layers):
            cache.streams.append(h)
            a = np.tanh(h @ self.params[f'W_in{layer}'] + self.params[f'b_in{layer}']) * unit_gate[layer]
            cache.hidden.append(a)
            h = h + layer_gate[layer] * (a @ self.params[f'W_out{layer}']) * embed_gate
        cache.streams.append(h)
        return h @ self.params['classifier'], cache

    def __call__(self, x, **gates):
        return self.forward(x, **gates)[0]

    def backward(self, cache, grad_logits):
        p = self.params
        grads = {'classifier': cache.streams[-1].T @ grad_logits}
        d_h = grad_logits @ p['classifier'].T
        for layer in reversed(range(self.spec.n_layers)):
            h_in, a = cache.streams[layer], cache.hidden[layer]
            d_block = d_h * cache.layer_gate[layer] * cache.embed_gate
            grads[f'W_out{layer}'] = a.T @ d_block
            d_a = d_block @ p[f'W_out{layer}'].T
            # a = tanh(.) * gate, so tanh' uses the ungated activation
            pre = np.tanh(h_in @ p[f'W_in{layer}'] + p[f'b_in{layer}'])
            d_pre = d_a * cache.unit_gate[layer] * (1.0 - pre * pre)
            grads[f'W_in{layer}'] = h_in.T @ d_pre
            grads[f'b_in{layer}'] = d_pre.sum(axis=0)
            d_h = d_h + d_pre @ p[f'W_in{layer}'].T
        grads['embed'] = cache.x.T @ (d_h * cache.embed_gate)
        return grads


@dataclass(frozen=True)
class ImportanceScores:
    layer: np.ndarray
    neuron: np.ndarray
    head: np.ndarray
    embed: np.ndarray
    spec: ToyNetSpec

    def __post_init__(self):
        spec = self.spec
        expected = {
            'layer': (spec.n_layers,),
            'neuron': (spec.n_layers, spec.n_units),
            'head': (spec.n_layers, spec.n_heads),
            'embed': (spec.n_embed,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ValueError(f'{name} scores have shape {value.shape}, expected {shape}')
            if not np.all(np.isfinite(value)) or np.any(value < 0):
                raise ValueError(f'{name} scores must be finite and non-negative')


def compute_importance(net, calibration):
    """Leave-one-out sensitivity: mean |delta logits| when a component is zeroed."""
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.ndim != 2 or calibration.shape[0] == 0:
        raise ValueError('calibration batch must be a non-empty (samples, features) array')
    spec = net.spec
    if calibration.shape[1] != spec.n_in:
        raise ValueError(f'calibration inputs have {calibration.shape[1]} features, network expects {spec.n_in}')
    base = net(calibration)

    def sensitivity(**gates):
        return float(np.mean(np.abs(net(calibration, **gates) - base)))

    layer = np.zeros(spec.n_layers)
    neuron = np.zeros((spec.n_layers, spec.n_units))
    head = np.zeros((spec.n_layers, spec.n_heads))
    embed = np.zeros(spec.n_embed)
    for l in range(spec.n_layers):
        gate = np.ones(spec.n_layers)
        gate[l] = 0.0
        layer[l] = sensitivity(layer_gate=gate)
        for j in range(spec.n_units):
            units = np.ones((spec.n_layers, spec.n_units))
            units[l, j] = 0.0
            neuron[l, j] = sensitivity(unit_gate=units)
        for g in range(spec.n_heads):
            units = np.ones((spec.n_layers, spec.n_units))
            units[l, g * spec.head_size:(g + 1) * spec.head_size] = 0.0
            head[l, g] = sensitivity(unit_gate=units)
    for e in range(spec.n_embed):
        gate = np.ones(spec.n_embed)
        gate[e] = 0.0
        embed[e] = sensitivity(embed_gate=gate)
    return ImportanceScores(layer=layer, neuron=neuron, head=head, embed=embed, spec=spec)


def threshold_mask(scores, theta):
    return (np.asarray(scores) >= theta).astype(np.float64)


@dataclass
class PruningMask:
    width: dict
    depth: np.ndarray
    combined: dict
    keep: dict = field(default_factory=dict)

    def popcount(self, which='combined'):
        masks = self.width if which == 'width' else self.combined
        return int(sum(m.sum() for m in masks.values()))

    def depth_popcount(self, spec):
        """Entries kept by the depth mask alone, broadcast over the weight tensors."""
        total = 0
        for name, shape in weight_shapes(spec).items():
            total += int(np.prod(shape) * depth_factor(name, self.depth))
        return total


def weight_shapes(spec):
    shapes = {'embed': (spec.n_in, spec.n_embed), 'classifier': (spec.n_embed, spec.n_classes)}
    for layer in range(spec.n_layers):
        shapes[f'W_in{layer}'] = (spec.n_embed, spec.n_units)
        shapes[f'b_in{layer}'] = (spec.n_units,)
        shapes[f'W_out{layer}'] = (spec.n_units, spec.n_embed)
    return shapes


def depth_factor(name, depth):
    for prefix in ('W_in', 'b_in', 'W_out'):
        if name.startswith(prefix):
            return depth[int(name[len(prefix):])]
    return 1.0


def build_masks(scores, theta, theta_depth=None):
    """Width mask from neuron/head/embed scores, depth mask from layer scores, combined product."""
    if not math.isfinite(theta):
        raise ValueError('pruning threshold must be finite')
    theta_depth = theta if theta_depth is None else theta_depth
    spec = scores.spec
    neuron_keep = threshold_mask(scores.neuron, theta)
    head_keep = threshold_mask(scores.head, theta)
    embed_keep = threshold_mask(scores.embed, theta)
    depth = threshold_mask(scores.layer, theta_depth)
    unit_keep = neuron_keep * np.repeat(head_keep, spec.head_size, axis=1)

    width = {
        'embed': np.broadcast_to(embed_keep, (spec.n_in, spec.n_embed)).copy(),
        'classifier': np.broadcast_to(embed_keep[:, None], (spec.n_embed, spec.n_classes)).copy(),
    }
    for layer in range(spec.n_layers):
        width[f'W_in{layer}'] = np.outer(embed_keep, unit_keep[layer])
        width[f'b_in{layer}'] = unit_keep[layer].copy()
        width[f'W_out{layer}'] = np.outer(unit_keep[layer], embed_keep)
    combined = {name: mask * depth_factor(name, depth) for name, mask in width.items()}
    keep = {'neuron': neuron_keep, 'head': head_keep, 'embed': embed_keep, 'layer': depth, 'unit': unit_keep}
    return PruningMask(width=width, depth=depth, combined=combined, keep=keep)


def apply_mask(weights, mask):
    """Hadamard product W * M; accepts single arrays or name-keyed dicts (e.g. PruningMask.combined)."""
    if isinstance(mask, PruningMask):
        mask = mask.combined
    if isinstance(weights, dict):
        return {name: apply_mask(value, mask[name]) if name in mask else value.copy() for name, value in weights.items()}
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    try:
        shape = np.broadcast_shapes(weights.shape, mask.shape)
    except ValueError as exc:
        raise ValueError(f'mask shape {mask.shape} does not broadcast to weights {weights.shape}') from exc
    if shape != weights.shape:
        raise ValueError(f'mask shape {mask.shape} would change weight shape {weights.shape}')
    return weights * mask


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    tau: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f'alpha must lie in [0, 1], got {self.alpha}')
        if self.tau <= 0:
            raise ValueError(f'tau must be positive, got {self.tau}')


def soften(logits, tau):
    if tau <= 0:
        raise ValueError(f'tau must be positive, got {tau}')
    return softmax(np.asarray(logits, dtype=np.float64) / tau, axis=-1)


def _check_distill_inputs(student_logits, teacher_logits, labels):
    student_logits = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    teacher_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if student_logits.shape != teacher_logits.shape or labels.shape != student_logits.shape:
        raise ValueError('student logits, teacher logits and labels must share one shape')
    if not np.all((labels == 0) | (labels == 1)) or not np.all(labels.sum(axis=1) == 1):
        raise ValueError('labels must be one-hot rows')
    return student_logits, teacher_logits, labels


def distill_terms(student_logits, teacher_logits, labels, cfg):
    """Batch-mean cross-entropy (hard labels) and KL(teacher_tau || student_tau)."""
    student_logits, teacher_logits, labels = _check_distill_inputs(student_logits, teacher_logits, labels)
    ce = -np.sum(labels * log_softmax(student_logits, axis=1), axis=1)
    log_pt = log_softmax(teacher_logits / cfg.tau, axis=1)
    log_ps = log_softmax(student_logits / cfg.tau, axis=1)
    kl = np.sum(np.exp(log_pt) * (log_pt - log_ps), axis=1)
    return float(np.mean(ce)), float(np.mean(kl))


def distill_loss(student_logits, teacher_logits, labels, cfg):
    ce, kl = distill_terms(student_logits, teacher_logits, labels, cfg)
    return (1.0 - cfg.alpha) * ce + cfg.alpha * kl


def distill_loss_grad(student_logits, teacher_logits, labels, cfg):
    """Gradient of distill_loss with respect to the student logits."""
    student_logits, teacher_logits, labels = _check_distill_inputs(student_logits, teacher_logits, labels)
    n = student_logits.shape[0]
    ce_grad = softmax(student_logits, axis=1) - labels
    kl_grad = (soften(student_logits, cfg.tau) - soften(teacher_logits, cfg.tau)) / cfg.tau
    return ((1.0 - cfg.alpha) * ce_grad + cfg.alpha * kl_grad) / n


@dataclass(frozen=True)
class QuantSpec:
    bit_width: int
    a: float
    b: float
    degenerate: bool = False

    def __post_init__(self):
        if int(self.bit_width) < 1:
            raise ValueError(f'bit width must be >= 1, got {self.bit_width}')
        if not self.b > self.a:
            raise ValueError(f'quantization range needs b > a, got a={self.a}, b={self.b}')

    @property
    def levels(self):
        return 2 ** int(self.bit_width) - 1

    @property
    def step(self):
        return (self.b - self.a) / self.levels


def quantize(weights, spec):
    """Clamp to [a, b], then snap to the nearest level of the lattice a + k * step."""
    weights = np.clip(np.asarray(weights, dtype=np.float64), spec.a, spec.b)
    return np.round((weights - spec.a) / spec.step) * spec.step + spec.a


def quantization_error(weights, spec):
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.sum((weights - quantize(weights, spec)) ** 2))


def _grid_search(weights, q, a_values, b_values):
    best = (math.inf, None, None)
    for a in a_values:
        for b in b_values:
            if b <= a:
                continue
            error = quantization_error(weights, QuantSpec(q, float(a), float(b)))
            if error < best[0]:
                best = (error, float(a), float(b))
    return best


def fit_quant_range(weights, q, grid=32, refine=True):
    """
    Coarse-to-fine grid search of (a, b) minimizing ||W - Q(W)||^2.

    The coarse grid always contains (min W, max W), so the fitted error never exceeds the
    min/max range error.
    """
    if grid < 2:
        raise ValueError('search grid needs at least 2 points per axis')
    weights = np.asarray(weights, dtype=np.float64).ravel()
    lo, hi = float(weights.min()), float(weights.max())
    if hi <= lo:
        logger.warning('constant tensor passed to fit_quant_range; returning a degenerate range')
        return QuantSpec(q, lo, lo + 1e-12 * max(1.0, abs(lo)), degenerate=True)
    half = 0.5 * (hi - lo)
    a_values = lo + np.arange(grid) * (half / (grid - 1))
    b_values = hi - np.arange(grid) * (half / (grid - 1))
    error, a, b = _grid_search(weights, q, a_values, b_values)
    if refine:
        cell = half / (grid - 1)
        a_fine = np.clip(np.linspace(a - cell, a + cell, grid), lo, lo + half)
        b_fine = np.clip(np.linspace(b - cell, b + cell, grid), hi - half, hi)
        fine_error, fine_a, fine_b = _grid_search(weights, q, a_fine, b_fine)
        if fine_error < error:
            error, a, b = fine_error, fine_a, fine_b
    return QuantSpec(q, a, b)


def read_jsonl(path):
    records = []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f'{path}:{number}: invalid JSON ({exc.msg})') from exc
    return records


def _index_by(records, key, name):
    index = {}
    for record in records:
        if key not in record:
            raise ValueError(f'{name} record without {key!r}: {record}')
        if record[key] in index:
            raise ValueError(f'duplicate {key} {record[key]!r} in {name}')
        index[record[key]] = record
    return index


def offline_accuracy(predictions, references):
    """Fraction of records whose answer appears (case-folded) inside the prediction."""
    predictions = _index_by(predictions, 'id', 'predictions')
    references = _index_by(references, 'id', 'references')
    if not references:
        raise ValueError('no reference records')
    missing = set(references) ^ set(predictions)
    if missing:
        raise ValueError(f'ids present on only one side: {sorted(map(str, missing))}')
    hits = sum(
        references[key]['answer'].casefold() in predictions[key]['prediction'].casefold()
        for key in references
    )
    return hits / len(references)


def split_accuracy_records(records):
    """Split combined {id, prediction, answer} rows into the two streams."""
    predictions = [{'id': r['id'], 'prediction': r['prediction']} for r in records]
    references = [{'id': r['id'], 'answer': r['answer']} for r in records]
    return predictions, references


def offline_hallucination(articles):
    """1 - (factual sentences / sentences), pooled over all articles."""
    articles = list(articles)
    if not articles:
        raise ValueError('no articles to score')
    factual = total = 0
    for article in articles:
        labels = article.get('labels') or []
        if not labels:
            raise ValueError(f'article {article.get("article_id")!r} has no sentence labels')
        if any(label not in (0, 1) for label in labels):
            raise ValueError(f'article {article.get("article_id")!r} has labels outside {{0, 1}}')
        factual += sum(labels)
        total += len(labels)
    return 1.0 - factual / total
