"""
Mobile edge computing system model as an episodic MDP.

Each slot every MLU splits its inference task: a fraction alpha is sent over a Rician uplink to
the MEC server, the rest runs on the local compact model. The reward is the reciprocal of the
summed latency plus a weighted penalty for violated accuracy, hallucination and energy budgets.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

MEC_POSITION = (0.0, 0.0)
FEATURES_PER_MLU = 7

TRACE_FIELDS = (
    'episode', 't', 'mlu', 'alpha', 'power_w', 'task_bits', 'gain', 'rate_bps',
    'l_local', 'l_off', 'l_mec', 'latency', 'e_local', 'e_off', 'energy',
    'local_accuracy', 'local_hallucination', 'accuracy', 'hallucination',
    'omega_accuracy', 'omega_hallucination', 'omega_energy', 'omega', 'reward',
)


def distance(mlu_pos, mec_pos, h_mec):
    if h_mec < 0:
        raise ValueError(f'MEC antenna height must be >= 0, got {h_mec}')
    dx = mlu_pos[0] - mec_pos[0]
    dy = mlu_pos[1] - mec_pos[1]
    return math.sqrt(dx * dx + dy * dy + h_mec * h_mec)


def channel_gain(d, g0, kappa, rng):
    """
    Large-scale path loss g0 / d^2 times a unit-mean Rician small-scale power gain.

    kappa of None or infinity is the line-of-sight limit and draws nothing from rng.
    """
    if d <= 0:
        raise ValueError('channel gain needs a positive distance')
    path = g0 / (d * d)
    if kappa is None or math.isinf(kappa):
        return path
    x, y = rng.standard_normal(2)
    scattered = complex(x, y) / math.sqrt(2.0)
    fading = math.sqrt(kappa / (kappa + 1.0)) + math.sqrt(1.0 / (kappa + 1.0)) * scattered
    return path * abs(fading) ** 2


def uplink_rate(k, powers, gains, bandwidth, noise):
    powers = np.asarray(powers, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)
    if powers.shape != gains.shape:
        raise ValueError('powers and gains must have one entry per MLU')
    received = powers * gains
    interference = float(np.sum(np.delete(received, k)))
    return bandwidth * math.log2(1.0 + received[k] / (interference + noise))


def uplink_rates(powers, gains, bandwidth, noise):
    return np.array([uplink_rate(k, powers, gains, bandwidth, noise) for k in range(len(powers))])


def local_cost(alpha, task_bits, cpu_freq, phi, energy_coeff):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f'offloading ratio must lie in [0, 1], got {alpha}')
    cycles = (1.0 - alpha) * phi * task_bits
    return cycles / cpu_freq, energy_coeff * cpu_freq * cpu_freq * cycles


def offload_cost(alpha, task_bits, rate, power, phi, mec_freq, slot_cap=math.inf):
    """Uplink latency, MEC compute latency and transmit energy; a dead link costs slot_cap seconds."""
    if alpha == 0.0:
        return 0.0, 0.0, 0.0
    bits = alpha * task_bits
    if rate <= 0.0:
        if math.isinf(slot_cap):
            raise ValueError('offloading over a zero-rate link without a slot cap')
        l_off = slot_cap
    else:
        l_off = min(bits / rate, slot_cap)
    return l_off, alpha * phi * task_bits / mec_freq, power * l_off


def qos_blend(alpha, a_local, h_local, a_mec, h_mec):
    return alpha * a_mec + (1.0 - alpha) * a_local, alpha * h_mec + (1.0 - alpha) * h_local


def _beta_draw(mean, concentration, rng):
    if concentration is None or math.isinf(concentration) or mean <= 0.0 or mean >= 1.0:
        return min(max(mean, 0.0), 1.0)
    return float(np.clip(rng.beta(mean * concentration, (1.0 - mean) * concentration), 0.0, 1.0))


def sample_slot_qos(profile, rng, concentration=50.0):
    """Per-slot (accuracy, hallucination) of a local variant, Beta-distributed around its offline means."""
    return (
        _beta_draw(profile.offline_accuracy, concentration, rng),
        _beta_draw(profile.offline_hallucination, concentration, rng),
    )


def penalty(accuracy, hallucination, energy, e_max, a_min, h_max):
    """Aggregate hinge penalty; returns (omega, components)."""
    k = len(accuracy)
    if k < 1:
        raise ValueError('penalty needs at least one MLU')
    components = {
        'accuracy': max(k * a_min - float(np.sum(accuracy)), 0.0),
        'hallucination': max(float(np.sum(hallucination)) - k * h_max, 0.0),
        'energy': max(float(np.sum(energy)) - float(np.sum(e_max)), 0.0),
    }
    return sum(components.values()), components


@dataclass
class EnvState:
    t: int
    positions: np.ndarray
    alpha: np.ndarray
    power: np.ndarray
    accuracy: np.ndarray
    hallucination: np.ndarray
    latency: np.ndarray
    task_bits: np.ndarray
    gains: np.ndarray

    @property
    def num_mlus(self):
        return len(self.alpha)


@dataclass(frozen=True)
class Action:
    alpha: np.ndarray
    power_w: np.ndarray

    @classmethod
    def from_vector(cls, vector, num_mlus):
        vector = np.asarray(vector, dtype=np.float64).ravel()
        if vector.size != 2 * num_mlus:
            raise ValueError(f'action vector has {vector.size} entries, expected {2 * num_mlus}')
        return cls(alpha=vector[:num_mlus].copy(), power_w=vector[num_mlus:].copy())

    def to_vector(self):
        return np.concatenate([self.alpha, self.power_w])


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    done: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def omega(self):
        return self.diagnostics['omega']


class MecEnv:
    """One environment instance owning its RNG; single-threaded."""

    def __init__(self, system, seed=0, task_scale_bits=None):
        self.system = system
        self.seed = seed
        self.task_scale_bits = task_scale_bits or system.task_size_bits[1]
        self.rng = np.random.default_rng(seed)
        self.p_max = np.array([mlu.p_max_w for mlu in system.mlus])
        self.e_max = np.array([mlu.e_max_j for mlu in system.mlus])
        self.cpu_freq = np.array([mlu.cpu_freq_hz for mlu in system.mlus])
        self.state = None

    @property
    def num_mlus(self):
        return self.system.num_mlus

    @property
    def observation_size(self):
        return FEATURES_PER_MLU * self.num_mlus

    @property
    def action_size(self):
        return 2 * self.num_mlus

    @property
    def action_scale(self):
        return np.concatenate([np.ones(self.num_mlus), self.p_max])

    def _positions(self):
        radius = self.system.cell_radius_m
        positions = np.zeros((self.num_mlus, 2))
        for k, mlu in enumerate(self.system.mlus):
            if mlu.position is not None:
                positions[k] = mlu.position
                continue
            r = radius * math.sqrt(self.rng.uniform())
            angle = 2.0 * math.pi * self.rng.uniform()
            positions[k] = (r * math.cos(angle), r * math.sin(angle))
        return positions

    def _task_sizes(self):
        low, high = self.system.task_size_bits
        return self.rng.uniform(low, high, size=self.num_mlus)

    def _gains(self, positions):
        system = self.system
        kappa = None if system.los_only else system.rician_k
        return np.array([
            channel_gain(distance(pos, MEC_POSITION, system.mec_height_m), system.ref_gain, kappa, self.rng)
            for pos in positions
        ])

    def reset(self):
        positions = self._positions()
        task_bits = self._task_sizes()
        gains = self._gains(positions)
        local = self.system.qos.local
        k = self.num_mlus
        self.state = EnvState(
            t=0,
            positions=positions,
            alpha=np.zeros(k),
            power=np.zeros(k),
            accuracy=np.full(k, local.offline_accuracy),
            hallucination=np.full(k, local.offline_hallucination),
            latency=np.zeros(k),
            task_bits=task_bits,
            gains=gains,
        )
        return self.state

    def observe(self, state=None):
        """Flat per-MLU feature vector with fixed affine scaling."""
        state = self.state if state is None else state
        system = self.system
        ref = system.ref_gain / max(system.mec_height_m, 1.0) ** 2
        features = np.stack([
            state.alpha,
            state.power / self.p_max,
            state.accuracy,
            state.hallucination,
            state.latency / system.latency_scale_s,
            state.task_bits / self.task_scale_bits,
            state.gains / ref,
        ], axis=1)
        return features.ravel()

    def step(self, action):
        if self.state is None:
            raise RuntimeError('step called before reset')
        if not isinstance(action, Action):
            action = Action.from_vector(action, self.num_mlus)
        system, qos, state = self.system, self.system.qos, self.state
        alpha = np.clip(action.alpha, 0.0, 1.0)
        power = np.clip(action.power_w, 0.0, self.p_max)
        rates = uplink_rates(power, state.gains, system.bandwidth_hz, system.noise_power_w)

        k = self.num_mlus
        diag = {name: np.zeros(k) for name in (
            'l_local', 'l_off', 'l_mec', 'latency', 'e_local', 'e_off', 'energy',
            'local_accuracy', 'local_hallucination', 'accuracy', 'hallucination',
        )}
        for i in range(k):
            x = state.task_bits[i]
            diag['l_local'][i], diag['e_local'][i] = local_cost(
                alpha[i], x, self.cpu_freq[i], system.cycles_per_bit, system.energy_coeff,
            )
            diag['l_off'][i], diag['l_mec'][i], diag['e_off'][i] = offload_cost(
                alpha[i], x, rates[i], power[i], system.phi_mec, system.mec_freq_hz, system.slot_cap_s,
            )
            diag['local_accuracy'][i], diag['local_hallucination'][i] = sample_slot_qos(
                qos.local, self.rng, qos.concentration,
            )
            diag['accuracy'][i], diag['hallucination'][i] = qos_blend(
                alpha[i], diag['local_accuracy'][i], diag['local_hallucination'][i],
                qos.mec_accuracy, qos.edge_hallucination,
            )
        diag['latency'] = np.maximum(diag['l_local'], diag['l_off'] + diag['l_mec'])
        diag['energy'] = diag['e_local'] + diag['e_off']
        omega, components = penalty(
            diag['accuracy'], diag['hallucination'], diag['energy'], self.e_max, qos.a_min, qos.h_max,
        )
        reward = 1.0 / (float(np.sum(diag['latency'])) + qos.penalty_weight * omega)
        diag.update(
            alpha=alpha, power_w=power, rate_bps=rates, gain=state.gains.copy(), task_bits=state.task_bits.copy(),
            omega=omega, omega_accuracy=components['accuracy'], omega_hallucination=components['hallucination'],
            omega_energy=components['energy'], reward=reward,
        )

        done = state.t == system.slots - 1
        task_bits = self._task_sizes()
        gains = self._gains(state.positions)
        self.state = replace(
            state,
            t=state.t + 1,
            alpha=alpha,
            power=power,
            accuracy=diag['accuracy'].copy(),
            hallucination=diag['hallucination'].copy(),
            latency=diag['latency'].copy(),
            task_bits=task_bits,
            gains=gains,
        )
        return StepOutcome(next_state=self.state, reward=reward, done=done, diagnostics=diag)


def trace_rows(episode, outcomes):
    for t, outcome in enumerate(outcomes):
        diag = outcome.diagnostics
        for k in range(len(diag['alpha'])):
            row = {'episode': episode, 't': t, 'mlu': k}
            for name in TRACE_FIELDS[3:]:
                value = diag[name]
                row[name] = repr(float(value[k] if np.ndim(value) else value))
            yield row


def write_trace(path, episode, outcomes, config_hash, seed):
    """One CSV row per (slot, MLU) with every diagnostics field."""
    with open(path, 'w', newline='') as handle:
        handle.write(f'# config_hash={config_hash} seed={seed}\n')
        writer = csv.DictWriter(handle, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(trace_rows(episode, outcomes))


def sanity_checks(system, seed=0, samples=100_000):
    """Closed-form and Monte-Carlo checks of the system model; returns one dict per check."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, value, expected, tolerance):
        passed = bool(abs(value - expected) <= tolerance)
        results.append({'check': name, 'value': value, 'expected': expected, 'tolerance': tolerance, 'passed': passed})

    check('distance', distance((20.0, 0.0), MEC_POSITION, 10.0), math.sqrt(500.0), 1e-12)
    check('los_gain', channel_gain(math.sqrt(500.0), 1e-3, None, rng), 2e-6, 1e-18)
    kappa = 8.0 if system.los_only else system.rician_k
    fading = np.mean([channel_gain(1.0, 1.0, kappa, rng) for _ in range(samples)])
    check('rician_mean', float(fading), 1.0, 0.02)
    check('uplink_rate', uplink_rate(0, [2.0], [2e-6], 1e7, 10 ** (-134 / 10)), 2.6582e8, 1e6)
    latency, energy = local_cost(0.0, 1e6, 2e9, 900.0, 1e-28)
    check('local_latency', latency, 0.45, 1e-12)
    check('local_energy', energy, 0.36, 1e-12)
    check('mec_latency', offload_cost(1.0, 1e6, 2.66e8, 1.0, 900.0, 1e10)[1], 0.09, 1e-12)
    check('qos_blend', qos_blend(0.5, 0.6, 0.0, 1.0, 0.0)[0], 0.8, 1e-12)
    accuracy = np.mean([sample_slot_qos(system.qos.local, rng, 50.0)[0] for _ in range(samples)])
    check('qos_mean', float(accuracy), system.qos.local.offline_accuracy, 0.01)
    check('penalty_accuracy', penalty([0.5, 0.5], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], 0.6, 1.0)[1]['accuracy'], 0.2, 1e-12)

    first, second = MecEnv(system, seed), MecEnv(system, seed)
    first.reset()
    second.reset()
    action = np.concatenate([np.full(system.num_mlus, 0.5), first.p_max / 2])
    rewards = [(first.step(action).reward, second.step(action).reward) for _ in range(min(5, system.slots))]
    results.append({
        'check': 'seed_determinism', 'value': None, 'expected': None, 'tolerance': 0.0,
        'passed': bool(all(a == b for a, b in rewards)),
    })
    for result in results:
        logger.info('env check %s: %s', result['check'], 'ok' if result['passed'] else 'FAILED')
    return results
