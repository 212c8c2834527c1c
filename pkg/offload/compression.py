"""
End-to-end compression of the toy network: prune, distill, quantize, then a deployment stub.

The teacher network labels a synthetic classification task; the student starts as a pruned
copy of it and is fine-tuned with the distillation loss while the pruning mask stays applied.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .ecld import (
    DistillConfig, ToyNetwork, VariantProfile, apply_mask, build_masks, compute_importance,
    distill_terms, distill_loss_grad, fit_quant_range, offline_accuracy, offline_hallucination,
    quantization_error, quantize, read_jsonl, split_accuracy_records, weight_shapes,
)
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)

FULL_PRECISION_BITS = 64
# Per-tensor overhead of a quantized tensor: the (a, b) pair as two 64-bit floats
RANGE_BITS = 2 * FULL_PRECISION_BITS

HARDWARE_BIT_WIDTHS = {
    'smartphone': 4,
    'laptop': 8,
    'edge-server': 8,
}

STAGES = ('original', 'quantization', 'pruning', 'pruning+distillation', 'ecld')


def hardware_bit_width(target):
    try:
        return HARDWARE_BIT_WIDTHS[target]
    except KeyError:
        raise ValueError(f'unknown deployment target {target!r}; expected one of {sorted(HARDWARE_BIT_WIDTHS)}')


def one_hot(indices, n_classes):
    labels = np.zeros((len(indices), n_classes))
    labels[np.arange(len(indices)), indices] = 1.0
    return labels


@dataclass
class TaskSplit:
    x: np.ndarray
    labels: np.ndarray
    teacher_logits: np.ndarray


def make_task(teacher, n, rng):
    """Synthetic inputs x ~ N(0, I) labelled by the teacher's argmax."""
    x = rng.standard_normal((n, teacher.spec.n_in))
    logits = teacher(x)
    return TaskSplit(x=x, labels=one_hot(np.argmax(logits, axis=1), teacher.spec.n_classes), teacher_logits=logits)


def task_accuracy(net, split):
    return float(np.mean(np.argmax(net(split.x), axis=1) == np.argmax(split.labels, axis=1)))


def storage_bits(mask, bit_width=FULL_PRECISION_BITS, spec=None):
    """Bits needed to store the kept weights; quantized tensors also store their range."""
    if mask is None:
        count = sum(int(np.prod(shape)) for shape in weight_shapes(spec).values())
        tensors = len(weight_shapes(spec))
    else:
        count = mask.popcount()
        tensors = len(mask.combined)
    overhead = tensors * RANGE_BITS if bit_width < FULL_PRECISION_BITS else 0
    return count * bit_width + overhead


def distill_finetune(student, teacher_logits, split, mask, cfg, steps, lr):
    """Full-batch Adam on the distillation loss; pruned entries stay exactly zero."""
    if steps == 0:
        return []
    state = AdamState()
    history = []
    for _ in range(steps):
        logits, cache = student.forward(split.x)
        ce, kl = distill_terms(logits, teacher_logits, split.labels, cfg)
        history.append((1.0 - cfg.alpha) * ce + cfg.alpha * kl)
        grads = student.backward(cache, distill_loss_grad(logits, teacher_logits, split.labels, cfg))
        grads = apply_mask(grads, mask.combined)
        adam_step(student.params, grads, lr, state)
        for name, m in mask.combined.items():
            student.params[name] *= m
    return history


def quantize_network(net, mask, bit_width, grid=32):
    """
    Quantize every tensor over its kept entries only, so pruned zeros stay zero.

    Returns the quantized parameter dict and the summed squared reconstruction error.
    """
    quantized, total_error = {}, 0.0
    for name, weights in net.params.items():
        keep = np.ones(weights.shape, dtype=bool) if mask is None else mask.combined[name].astype(bool)
        values = weights[keep]
        out = np.zeros_like(weights)
        if values.size:
            spec = fit_quant_range(values, bit_width, grid=grid)
            out[keep] = quantize(values, spec)
            total_error += quantization_error(values, spec)
        quantized[name] = out
    return quantized, total_error


@dataclass
class StageRow:
    stage: str
    toy_accuracy: float
    kept_params: int
    bit_width: int
    storage_bits: int
    storage_mb: float
    energy_wh: float

    def to_dict(self):
        return {
            'stage': self.stage,
            'toy_accuracy': self.toy_accuracy,
            'kept_params': self.kept_params,
            'bit_width': self.bit_width,
            'storage_bits': self.storage_bits,
            'storage_mb': self.storage_mb,
            'energy_wh': self.energy_wh,
        }


@dataclass
class CompressionResult:
    report: dict
    profile: VariantProfile
    deployment: dict
    stages: list = field(default_factory=list)


def estimate_energy(base, kept, total, bits):
    """Half the energy scales with arithmetic (kept weights), half with memory traffic (stored bits)."""
    return base.energy_wh * (0.5 * kept / total + 0.5 * bits / (total * FULL_PRECISION_BITS))


def corpus_metrics(cfg, fallback_accuracy, fallback_hallucination):
    accuracy, hallucination = fallback_accuracy, fallback_hallucination
    if cfg.accuracy_corpus:
        predictions, references = split_accuracy_records(read_jsonl(cfg.accuracy_corpus))
        accuracy = offline_accuracy(predictions, references)
    if cfg.hallucination_corpus:
        hallucination = offline_hallucination(read_jsonl(cfg.hallucination_corpus))
    return accuracy, hallucination


def run_pipeline(cfg):
    """Run pruning, distillation, quantization and the deployment stub for one CompressConfig."""
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.net
    teacher = ToyNetwork(spec, rng=rng, scale=cfg.teacher_scale)
    calibration = rng.standard_normal((cfg.n_calibration, spec.n_in))
    train = make_task(teacher, cfg.n_train, rng)
    test = make_task(teacher, cfg.n_test, rng)

    scores = compute_importance(teacher, calibration)
    if cfg.theta is not None:
        theta = cfg.theta
    else:
        width_scores = np.concatenate([scores.neuron.ravel(), scores.head.ravel(), scores.embed.ravel()])
        theta = float(np.quantile(width_scores, cfg.theta_quantile))
    mask = build_masks(scores, theta, cfg.theta_depth)
    bit_width = cfg.bit_width or hardware_bit_width(cfg.target)
    distill_cfg = DistillConfig(alpha=cfg.distill_alpha, tau=cfg.distill_tau)
    total = teacher.num_params
    kept = mask.popcount()
    logger.info('pruning threshold %.6g keeps %d of %d weights', theta, kept, total)

    pruned = teacher.copy()
    pruned.load_state_dict(apply_mask(teacher.params, mask))
    pruned_accuracy = task_accuracy(pruned, test)

    student = pruned.copy()
    history = distill_finetune(
        student, train.teacher_logits, train, mask, distill_cfg, cfg.distill_steps, cfg.distill_lr,
    )
    distilled_accuracy = task_accuracy(student, test)
    ce, kl = distill_terms(student(test.x), test.teacher_logits, test.labels, distill_cfg)

    teacher_q, teacher_q_error = quantize_network(teacher, None, bit_width, cfg.grid)
    teacher_quantized = teacher.copy()
    teacher_quantized.load_state_dict(teacher_q)
    final_q, final_q_error = quantize_network(student, mask, bit_width, cfg.grid)
    final = student.copy()
    final.load_state_dict(final_q)
    final_accuracy = task_accuracy(final, test)

    base = cfg.base_profile
    baseline_bits = storage_bits(None, FULL_PRECISION_BITS, spec)

    def stage(name, net, kept_params, bits_per_weight, stage_mask):
        bits = storage_bits(stage_mask, bits_per_weight, spec)
        return StageRow(
            stage=name,
            toy_accuracy=task_accuracy(net, test),
            kept_params=kept_params,
            bit_width=bits_per_weight,
            storage_bits=bits,
            storage_mb=base.storage_mb * bits / baseline_bits,
            energy_wh=estimate_energy(base, kept_params, total, bits),
        )

    stages = [
        stage('original', teacher, total, FULL_PRECISION_BITS, None),
        stage('quantization', teacher_quantized, total, bit_width, None),
        stage('pruning', pruned, kept, FULL_PRECISION_BITS, mask),
        stage('pruning+distillation', student, kept, FULL_PRECISION_BITS, mask),
        stage('ecld', final, kept, bit_width, mask),
    ]
    ecld_row = stages[-1]

    teacher_accuracy = stages[0].toy_accuracy
    relative = final_accuracy / teacher_accuracy if teacher_accuracy > 0 else 0.0
    accuracy, hallucination = corpus_metrics(
        cfg, min(1.0, base.offline_accuracy * relative), base.offline_hallucination,
    )
    profile = VariantProfile(
        name=cfg.variant_name,
        offline_accuracy=accuracy,
        offline_hallucination=hallucination,
        storage_mb=ecld_row.storage_mb,
        energy_wh=ecld_row.energy_wh,
        family=base.family,
        method='ecld',
    )
    deployment = {
        'target': cfg.target,
        'hardware_bit_width': hardware_bit_width(cfg.target),
        'bit_width': bit_width,
        'size_bits': ecld_row.storage_bits,
        'size_mb': ecld_row.storage_mb,
        'profile': cfg.variant_name,
        'artifact': None,
    }
    report = {
        'theta': theta,
        'theta_depth': cfg.theta_depth if cfg.theta_depth is not None else theta,
        'bit_width': bit_width,
        'masks': {
            'total_params': total,
            'width_popcount': mask.popcount('width'),
            'depth_popcount': mask.depth_popcount(spec),
            'combined_popcount': kept,
            'pruned_params': total - kept,
            'kept_layers': int(mask.depth.sum()),
            'kept_heads': int(mask.keep['head'].sum()),
            'kept_neurons': int(mask.keep['neuron'].sum()),
            'kept_embed': int(mask.keep['embed'].sum()),
        },
        'importance': {
            'layer': scores.layer.tolist(),
            'head': scores.head.tolist(),
            'neuron': scores.neuron.tolist(),
            'embed': scores.embed.tolist(),
        },
        'distillation': {
            'alpha': cfg.distill_alpha,
            'tau': cfg.distill_tau,
            'steps': cfg.distill_steps,
            'initial_loss': history[0] if history else None,
            'final_loss': history[-1] if history else None,
            'test_cross_entropy': ce,
            'test_kl': kl,
        },
        'quantization': {
            'bit_width': bit_width,
            'teacher_error': teacher_q_error,
            'ecld_error': final_q_error,
        },
        'toy_accuracy': {
            'teacher': teacher_accuracy,
            'pruned': pruned_accuracy,
            'distilled': distilled_accuracy,
            'ecld': final_accuracy,
        },
        'storage_ratio': ecld_row.storage_bits / baseline_bits,
        'hallucination': profile.offline_hallucination,
        'accuracy': profile.offline_accuracy,
        'storage_mb': profile.storage_mb,
        'energy_wh': profile.energy_wh,
        'stages': [row.to_dict() for row in stages],
    }
    return CompressionResult(report=report, profile=profile, deployment=deployment, stages=stages)
