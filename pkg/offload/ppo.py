"""
On-policy actor-critic: squashed Gaussian actor, state-value critic, clipped surrogate,
advantage estimation and entropy regularization.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .nn import (
    Adam, Mlp, MlpSpec, Module, gaussian_entropy, gaussian_head, gaussian_log_prob,
    gaussian_log_prob_grads, prefixed, squash, squash_log_det,
)

logger = logging.getLogger(__name__)


class GaussianPolicy(Module):
    """Mean network plus a state-independent log standard deviation; actions are squashed into [0, scale]."""

    def __init__(self, n_state, n_action, scale, hidden=(256, 256), init_log_std=-0.5, rng=None):
        super().__init__()
        self.mean_net = Mlp(MlpSpec.build(n_state, n_action, hidden), rng=rng)
        self.scale = np.asarray(scale, dtype=np.float64)
        if self.scale.shape != (n_action,):
            raise ValueError(f'action scale must have {n_action} entries')
        self.params = prefixed('mean', self.mean_net.params)
        self.params['log_std'] = np.full(n_action, float(init_log_std))

    @property
    def log_std(self):
        return self.params['log_std']

    def mean(self, states):
        return self.mean_net.forward(states)

    def sample(self, states, rng):
        mean, _ = self.mean(states)
        return gaussian_head(mean, self.log_std, rng, scale=self.scale)

    def mean_action(self, states):
        mean, _ = self.mean(states)
        return squash(mean, self.scale)

    def log_prob(self, states, u):
        """Log density of the squashed actions produced by pre-squash samples u."""
        mean, cache = self.mean(states)
        return gaussian_log_prob(u, mean, self.log_std) - squash_log_det(u, self.scale), mean, cache

    def log_prob_backward(self, u, mean, cache, grad_logp):
        """Parameter gradients of sum_i grad_logp[i] * log pi(a_i | s_i)."""
        d_mean, d_log_std = gaussian_log_prob_grads(u, mean, self.log_std)
        mean_grads, _ = self.mean_net.backward(grad_logp[:, None] * d_mean, cache)
        grads = prefixed('mean', mean_grads)
        grads['log_std'] = np.sum(grad_logp[:, None] * d_log_std, axis=0)
        return grads


class ValueCritic(Module):
    def __init__(self, n_state, hidden=(256, 256), rng=None):
        super().__init__()
        self.net = Mlp(MlpSpec.build(n_state, 1, hidden), rng=rng)
        self.params = prefixed('value', self.net.params)

    def value(self, states):
        return self.net(states)[:, 0]

    def forward(self, states):
        out, cache = self.net.forward(states)
        return out[:, 0], cache

    def backward(self, grad_values, cache):
        grads, _ = self.net.backward(np.asarray(grad_values)[:, None], cache)
        return prefixed('value', grads)


@dataclass
class Trajectory:
    """Time-aligned arrays of one or more concatenated episodes."""
    states: np.ndarray
    u: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_states: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        for name in ('states', 'u', 'actions', 'dones', 'next_states', 'log_probs', 'values'):
            if len(getattr(self, name)) != n:
                raise ValueError(f'trajectory field {name} has {len(getattr(self, name))} rows, expected {n}')
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError('behavior log-probabilities must be finite')

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def concatenate(cls, trajectories):
        return cls(**{
            name: np.concatenate([getattr(traj, name) for traj in trajectories])
            for name in cls.__dataclass_fields__
        })


def prob_ratio(new_logp, old_logp):
    return np.exp(np.asarray(new_logp) - np.asarray(old_logp))


def clipped_surrogate(ratios, advantages, eps):
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps)
    return float(-np.mean(np.minimum(ratios * advantages, clipped * advantages)))


def clipped_surrogate_grad(ratios, advantages, eps):
    """d loss / d ratio; zero wherever the clipped branch is the active minimum."""
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    blocked = ((advantages >= 0) & (ratios > 1.0 + eps)) | ((advantages < 0) & (ratios < 1.0 - eps))
    return np.where(blocked, 0.0, -advantages / len(ratios))


def td_targets(rewards, next_values, dones, gamma):
    return rewards + gamma * (1.0 - dones) * next_values


def gae_advantages(rewards, values, next_values, dones, gamma, lam):
    """Generalized advantage estimates; done flags cut the recursion at episode ends."""
    deltas = td_targets(rewards, next_values, dones, gamma) - values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        running = deltas[t] + gamma * lam * (1.0 - dones[t]) * running
        advantages[t] = running
    return advantages


def lambda_returns(rewards, values, next_values, dones, gamma, lam):
    """Critic targets G_t = r_t + gamma (1 - d_t) ((1 - lam) V(s_{t+1}) + lam G_{t+1})."""
    returns = np.zeros_like(np.asarray(rewards, dtype=np.float64))
    following = 0.0
    for t in reversed(range(len(rewards))):
        if dones[t]:
            following = 0.0
        returns[t] = rewards[t] + gamma * (1.0 - dones[t]) * ((1.0 - lam) * next_values[t] + lam * following)
        following = returns[t]
    return returns


def normalize_advantages(advantages):
    std = np.std(advantages)
    centered = advantages - np.mean(advantages)
    return centered / std if std > 1e-8 else centered


def entropy_estimate(log_std, u, scale):
    """Gaussian entropy plus the mean log-Jacobian of the squash over the given samples."""
    return gaussian_entropy(log_std) + float(np.mean(squash_log_det(u, scale)))


def entropy_loss(log_std, u, scale, coef):
    if coef == 0.0:
        return 0.0
    return -coef * entropy_estimate(log_std, u, scale)


def critic_loss(values, targets):
    diff = np.asarray(values, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(diff * diff))


@dataclass
class PpoBatch:
    states: np.ndarray
    u: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.advantages)

    def take(self, index):
        return PpoBatch(*(getattr(self, name)[index] for name in self.__dataclass_fields__))


def actor_loss_and_grads(actor, batch, clip_eps, entropy_coef):
    """Clipped surrogate plus entropy loss on a minibatch, with parameter gradients."""
    new_logp, mean, cache = actor.log_prob(batch.states, batch.u)
    ratios = prob_ratio(new_logp, batch.log_probs)
    surrogate = clipped_surrogate(ratios, batch.advantages, clip_eps)
    d_ratio = clipped_surrogate_grad(ratios, batch.advantages, clip_eps)
    grads = actor.log_prob_backward(batch.u, mean, cache, d_ratio * ratios)
    ent_loss = entropy_loss(actor.log_std, batch.u, actor.scale, entropy_coef)
    if entropy_coef != 0.0:
        grads['log_std'] = grads['log_std'] - entropy_coef
    stats = {
        'surrogate': surrogate,
        'entropy_loss': ent_loss,
        'clip_fraction': float(np.mean(np.abs(ratios - 1.0) > clip_eps)),
        'approx_kl': float(np.mean(batch.log_probs - new_logp)),
    }
    return surrogate + ent_loss, grads, stats


def critic_loss_and_grads(critic, states, targets):
    values, cache = critic.forward(states)
    grads = critic.backward(2.0 * (values - targets) / len(targets), cache)
    return critic_loss(values, targets), grads


def add_grads(total, extra):
    return {key: total[key] + extra[key] if key in extra else total[key] for key in total}


def ppo_update(actor, critic, actor_opt, critic_opt, batch, cfg, rng, auxiliary=None):
    """
    cfg.epochs passes of shuffled minibatch steps on the actor and critic losses.

    auxiliary, when given, maps the actor to (loss, grads) added to every actor step.
    """
    if len(batch) == 0:
        raise ValueError('cannot update on an empty batch')
    if cfg.normalize_advantages:
        batch = PpoBatch(batch.states, batch.u, batch.log_probs, normalize_advantages(batch.advantages), batch.targets)
    totals = {'actor_loss': 0.0, 'critic_loss': 0.0, 'surrogate': 0.0, 'entropy_loss': 0.0,
              'clip_fraction': 0.0, 'approx_kl': 0.0, 'auxiliary_loss': 0.0}
    steps = 0
    size = min(cfg.minibatch_size, len(batch))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), size):
            mini = batch.take(order[start:start + size])
            loss, grads, stats = actor_loss_and_grads(actor, mini, cfg.clip_eps, cfg.entropy_coef)
            if auxiliary is not None:
                aux_loss, aux_grads = auxiliary(actor)
                loss += aux_loss
                grads = add_grads(grads, aux_grads)
                totals['auxiliary_loss'] += aux_loss
            actor_opt.step(grads)
            value_loss, value_grads = critic_loss_and_grads(critic, mini.states, mini.targets)
            critic_opt.step(value_grads)
            totals['actor_loss'] += loss
            totals['critic_loss'] += value_loss
            for key in ('surrogate', 'entropy_loss', 'clip_fraction', 'approx_kl'):
                totals[key] += stats[key]
            steps += 1
    return {key: value / steps for key, value in totals.items()}


def build_agent(n_state, n_action, scale, cfg, rng):
    """Actor, critic and their optimizers from one PpoConfig."""
    actor = GaussianPolicy(n_state, n_action, scale, cfg.hidden, cfg.init_log_std, rng=rng)
    critic = ValueCritic(n_state, cfg.hidden, rng=rng)
    actor_opt = Adam(actor, cfg.actor_lr, max_grad_norm=cfg.max_grad_norm)
    critic_opt = Adam(critic, cfg.critic_lr, max_grad_norm=cfg.max_grad_norm)
    return actor, critic, actor_opt, critic_opt
