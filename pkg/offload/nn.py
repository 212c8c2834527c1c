"""
Differentiable building blocks for the offloading agents.

Every network here has one fixed layout and hand-derived gradients: fully connected
networks, a gated recurrent unit, a squashed diagonal Gaussian head and an adaptive-moment
optimizer. Arrays are 64-bit floats in row-major batches of shape (batch, features).
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'edgeflock-checkpoint'
CHECKPOINT_VERSION = 1

LOG_2PI = float(np.log(2.0 * np.pi))

# Activations take the pre-activation and return (output, derivative expressed from output)
ACTIVATIONS = {
    'tanh': (np.tanh, lambda y: 1.0 - y * y),
    'sigmoid': (expit, lambda y: y * (1.0 - y)),
}


def uniform_fan_in(rng, fan_in, shape):
    """Scaled uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def as_batch(x, width, name='input'):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f'{name} has shape {x.shape}, expected (batch, {width})')
    return x


def prefixed(prefix, mapping):
    return {f'{prefix}.{key}': value for key, value in mapping.items()}


class Module:
    """Holds named parameter arrays; composite modules share the arrays of their children."""

    def __init__(self):
        self.params = {}

    @property
    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self):
        return {key: np.zeros_like(value) for key, value in self.params.items()}

    def state_dict(self):
        return {key: value.copy() for key, value in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise ValueError(f'state is missing parameters: {sorted(missing)}')
        for key, target in self.params.items():
            source = np.asarray(state[key], dtype=np.float64)
            if source.shape != target.shape:
                raise ValueError(f'parameter {key} has shape {source.shape}, expected {target.shape}')
            target[...] = source


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths input -> hidden... -> output with a smooth hidden activation."""
    sizes: tuple
    activation: str = 'tanh'

    def __post_init__(self):
        if len(self.sizes) < 3:
            raise ValueError('an MLP needs at least one hidden layer')
        if any(int(width) < 1 for width in self.sizes):
            raise ValueError(f'layer widths must be >= 1, got {self.sizes}')
        if self.activation not in ACTIVATIONS:
            raise ValueError(f'unknown activation {self.activation!r}')

    @classmethod
    def build(cls, n_in, n_out, hidden=(256, 256), activation='tanh'):
        return cls(sizes=(int(n_in), *[int(width) for width in hidden], int(n_out)), activation=activation)


@dataclass
class MlpCache:
    activations: list = field(default_factory=list)


class Mlp(Module):
    """Fully connected network with a linear output layer."""

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        self._activate, self._derivative = ACTIVATIONS[spec.activation]
        self._last_cache = None
        for i, (n_in, n_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
            if rng is None:
                self.params[f'W{i}'] = np.zeros((n_in, n_out))
            else:
                self.params[f'W{i}'] = uniform_fan_in(rng, n_in, (n_in, n_out))
            self.params[f'b{i}'] = np.zeros(n_out)

    @property
    def n_layers(self):
        return len(self.spec.sizes) - 1

    @property
    def n_in(self):
        return self.spec.sizes[0]

    @property
    def n_out(self):
        return self.spec.sizes[-1]

    def forward(self, x):
        out = as_batch(x, self.n_in)
        cache = MlpCache(activations=[out])
        for i in range(self.n_layers):
            out = out @ self.params[f'W{i}'] + self.params[f'b{i}']
            if i < self.n_layers - 1:
                out = self._activate(out)
            cache.activations.append(out)
        self._last_cache = cache
        return out, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, grad_out, cache=None):
        """Return (parameter gradients, gradient w.r.t. the input) for an upstream gradient."""
        cache = cache if cache is not None else self._last_cache
        if cache is None:
            raise RuntimeError('backward called before any forward pass was cached')
        delta = np.asarray(grad_out, dtype=np.float64).reshape(cache.activations[-1].shape)
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * self._derivative(cache.activations[i + 1])
            grads[f'W{i}'] = cache.activations[i].T @ delta
            grads[f'b{i}'] = delta.sum(axis=0)
            delta = delta @ self.params[f'W{i}'].T
        return grads, delta


@dataclass(frozen=True)
class RecurrentSpec:
    input_size: int
    hidden_size: int = 256

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1:
            raise ValueError('recurrent widths must be >= 1')


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    u: np.ndarray
    n: np.ndarray
    hn: np.ndarray


class GruCell(Module):
    """
    Gated recurrent unit:

        r = sigmoid(x W_r + h U_r + b_r)
        u = sigmoid(x W_z + h U_z + b_z)
        n = tanh(x W_n + r * (h U_n) + b_n)
        h' = u * h + (1 - u) * n
    """

    GATES = ('r', 'z', 'n')

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        n_in, n_h = spec.input_size, spec.hidden_size
        fan_in = n_in + n_h
        for gate in self.GATES:
            if rng is None:
                self.params[f'W_{gate}'] = np.zeros((n_in, n_h))
                self.params[f'U_{gate}'] = np.zeros((n_h, n_h))
            else:
                self.params[f'W_{gate}'] = uniform_fan_in(rng, fan_in, (n_in, n_h))
                self.params[f'U_{gate}'] = uniform_fan_in(rng, fan_in, (n_h, n_h))
            self.params[f'b_{gate}'] = np.zeros(n_h)

    def initial_state(self, batch):
        return np.zeros((batch, self.spec.hidden_size))

    def forward(self, x, h_prev):
        x = as_batch(x, self.spec.input_size, 'recurrent input')
        h_prev = as_batch(h_prev, self.spec.hidden_size, 'hidden state')
        p = self.params
        r = expit(x @ p['W_r'] + h_prev @ p['U_r'] + p['b_r'])
        u = expit(x @ p['W_z'] + h_prev @ p['U_z'] + p['b_z'])
        hn = h_prev @ p['U_n']
        n = np.tanh(x @ p['W_n'] + r * hn + p['b_n'])
        h = u * h_prev + (1.0 - u) * n
        return h, GruCache(x=x, h_prev=h_prev, r=r, u=u, n=n, hn=hn)

    def backward(self, cache, grad_h):
        """Return (parameter gradients, grad input, grad previous hidden state)."""
        if cache is None:
            raise RuntimeError('backward called before any forward pass was cached')
        p = self.params
        x, h_prev, r, u, n, hn = cache.x, cache.h_prev, cache.r, cache.u, cache.n, cache.hn
        d_n = grad_h * (1.0 - u)
        d_u = grad_h * (h_prev - n)
        d_h = grad_h * u

        a_n = d_n * (1.0 - n * n)
        d_r = a_n * hn
        d_hn = a_n * r
        a_u = d_u * u * (1.0 - u)
        a_r = d_r * r * (1.0 - r)

        grads = {
            'W_n': x.T @ a_n, 'U_n': h_prev.T @ d_hn, 'b_n': a_n.sum(axis=0),
            'W_z': x.T @ a_u, 'U_z': h_prev.T @ a_u, 'b_z': a_u.sum(axis=0),
            'W_r': x.T @ a_r, 'U_r': h_prev.T @ a_r, 'b_r': a_r.sum(axis=0),
        }
        d_x = a_n @ p['W_n'].T + a_u @ p['W_z'].T + a_r @ p['W_r'].T
        d_h = d_h + d_hn @ p['U_n'].T + a_u @ p['U_z'].T + a_r @ p['U_r'].T
        return grads, d_x, d_h

    def unroll(self, xs, h0):
        """Run the cell over a (steps, batch, input) sequence; returns hidden states and caches."""
        hs, caches = [], []
        h = h0
        for x in xs:
            h, cache = self.forward(x, h)
            hs.append(h)
            caches.append(cache)
        return hs, caches

    def backward_through_time(self, caches, grad_hs):
        """Backpropagate per-step upstream gradients through an unrolled sequence."""
        grads = self.zero_grads()
        grad_xs = [None] * len(caches)
        carry = np.zeros_like(caches[-1].h_prev)
        for t in reversed(range(len(caches))):
            step_grads, grad_xs[t], carry = self.backward(caches[t], grad_hs[t] + carry)
            for key, value in step_grads.items():
                grads[key] += value
        return grads, grad_xs, carry


def gaussian_log_prob(u, mean, log_std):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_log_prob_grads(u, mean, log_std):
    """Gradients of gaussian_log_prob w.r.t. the mean and the log standard deviation."""
    inv_var = np.exp(-2.0 * log_std)
    diff = u - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def squash(u, scale):
    return scale * expit(u)


def squash_log_det(u, scale):
    """log |d squash / d u| summed over action dimensions."""
    log_s = -np.logaddexp(0.0, -u)
    log_one_minus_s = -np.logaddexp(0.0, u)
    return np.sum(np.log(scale) + log_s + log_one_minus_s, axis=-1)


def squashed_log_prob(u, mean, log_std, scale):
    return gaussian_log_prob(u, mean, log_std) - squash_log_det(u, scale)


@dataclass
class HeadSample:
    u: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


def gaussian_head(mean, log_std, rng, scale=None, noise=None):
    """
    Reparameterized sample u = mean + std * eps, squashed into [0, scale] per dimension.

    The returned log-probability is the density of the squashed action, including the
    change-of-variables correction.
    """
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.ones(mean.shape[-1]) if scale is None else np.asarray(scale, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    u = mean + np.exp(log_std) * noise
    return HeadSample(u=u, action=squash(u, scale), log_prob=squashed_log_prob(u, mean, log_std, scale))


def global_norm(grads):
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'step': self.step,
            'm': {key: array_to_json(value) for key, value in self.m.items()},
            'v': {key: array_to_json(value) for key, value in self.v.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            step=int(data['step']),
            m={key: array_from_json(value) for key, value in data['m'].items()},
            v={key: array_from_json(value) for key, value in data['v'].items()},
        )


def adam_step(params, grads, lr, state, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
    """Adaptive-moment update with bias correction; parameters are updated in place."""
    if max_grad_norm is not None:
        norm = global_norm(grads)
        if norm > max_grad_norm:
            grads = {key: g * (max_grad_norm / norm) for key, g in grads.items()}
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for key, param in params.items():
        grad = grads.get(key)
        if grad is None:
            continue
        m = state.m.setdefault(key, np.zeros_like(param))
        v = state.v.setdefault(key, np.zeros_like(param))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params


class Adam:
    """Optimizer bound to one module's parameters."""

    def __init__(self, module, lr, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.module = module
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()

    def step(self, grads):
        adam_step(self.module.params, grads, self.lr, self.state, self.betas, self.eps, self.max_grad_norm)


def array_to_json(array):
    array = np.asarray(array, dtype=np.float64)
    return {'shape': list(array.shape), 'data': array.ravel().tolist()}


def array_from_json(data):
    return np.asarray(data['data'], dtype=np.float64).reshape(data['shape'])


def save_checkpoint(path, modules, optimizers=None, extra=None):
    """Write a versioned JSON checkpoint; float repr round-trips bit-exactly."""
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'modules': {
            name: {key: array_to_json(value) for key, value in module.params.items()}
            for name, module in modules.items()
        },
        'optimizers': {name: opt.state.to_dict() for name, opt in (optimizers or {}).items()},
        'extra': extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_text(json.dumps(payload, sort_keys=True))
    tmp.replace(path)
    logger.debug('checkpoint written to %s', path)


def load_checkpoint(path, modules, optimizers=None):
    """Restore modules (and optimizer moments) in place; returns the 'extra' payload."""
    payload = json.loads(Path(path).read_text())
    if payload.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f'{path} is not an edgeflock checkpoint')
    if payload.get('version') != CHECKPOINT_VERSION:
        raise ValueError(f'unsupported checkpoint version {payload.get("version")}')
    for name, module in modules.items():
        if name not in payload['modules']:
            raise ValueError(f'checkpoint has no module named {name!r}')
        module.load_state_dict({key: array_from_json(value) for key, value in payload['modules'][name].items()})
    for name, opt in (optimizers or {}).items():
        if name in payload['optimizers']:
            opt.state = AdamState.from_dict(payload['optimizers'][name])
    return payload['extra']
