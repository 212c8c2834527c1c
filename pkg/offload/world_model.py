"""
Recurrent state-space world model over flat environment observations.

Latent step t:
    h_t = GRU([z_{t-1}, a_{t-1}], h_{t-1})          deterministic path, zeros before the first step
    z_t ~ q(z | h_t, o_t)   (posterior, filtering)    or   z_t ~ p(z | h_t)   (prior, imagination)
    decoders on [h_t, z_t]: observation o_t, reward r_{t-1}, done d_{t-1}

Training uses reparameterized posterior samples and hand-derived backpropagation through time.
"""
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .nn import GruCell, Mlp, MlpSpec, Module, RecurrentSpec, as_batch, prefixed
from .ppo import td_targets

logger = logging.getLogger(__name__)

LOG_STD_MIN = -6.0
LOG_STD_MAX = 3.0

SUBMODULES = ('gru', 'prior', 'posterior', 'obs', 'reward', 'done')


def gaussian_kl(mean_q, log_std_q, mean_p, log_std_p):
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis."""
    var_q = np.exp(2.0 * log_std_q)
    var_p = np.exp(2.0 * log_std_p)
    diff = mean_q - mean_p
    return np.sum(log_std_p - log_std_q + (var_q + diff * diff) / (2.0 * var_p) - 0.5, axis=-1)


def gaussian_kl_grads(mean_q, log_std_q, mean_p, log_std_p):
    """Gradients of gaussian_kl w.r.t. (mean_q, log_std_q, mean_p, log_std_p)."""
    inv_var_p = np.exp(-2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    diff = mean_q - mean_p
    d_mean_q = diff * inv_var_p
    return d_mean_q, var_q * inv_var_p - 1.0, -d_mean_q, 1.0 - (var_q + diff * diff) * inv_var_p


def split_gaussian(out, n_z):
    """Split a head output into (mean, clipped log-std, mask of unclipped entries)."""
    raw = out[:, n_z:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return out[:, :n_z], log_std, ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)


@dataclass(frozen=True)
class RssmState:
    h: np.ndarray
    z: np.ndarray
    prior_mean: np.ndarray
    prior_log_std: np.ndarray
    post_mean: np.ndarray = None
    post_log_std: np.ndarray = None


@dataclass
class WmBatch:
    """obs: (B, L+1, n_obs); actions: (B, L, n_a); rewards, dones: (B, L)."""
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        if self.actions.shape[1] < 1:
            raise ValueError('world-model sequences need at least one transition')
        b, length = self.rewards.shape
        if self.obs.shape[:2] != (b, length + 1) or self.actions.shape[:2] != (b, length) or self.dones.shape != (b, length):
            raise ValueError('world-model batch arrays are misaligned')

    @property
    def steps(self):
        return self.actions.shape[1]


@dataclass
class Prediction:
    next_states: np.ndarray
    rewards: np.ndarray
    done_probs: np.ndarray
    h: np.ndarray


class WorldModel(Module):
    def __init__(self, n_obs, n_action, action_scale, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        self.n_obs, self.n_action, self.n_z, self.n_h = n_obs, n_action, cfg.n_z, cfg.n_h
        self.action_scale = np.asarray(action_scale, dtype=np.float64)
        hidden = cfg.hidden
        self.gru = GruCell(RecurrentSpec(cfg.n_z + n_action, cfg.n_h), rng=rng)
        self.prior = Mlp(MlpSpec.build(cfg.n_h, 2 * cfg.n_z, hidden), rng=rng)
        self.posterior = Mlp(MlpSpec.build(cfg.n_h + n_obs, 2 * cfg.n_z, hidden), rng=rng)
        self.obs_decoder = Mlp(MlpSpec.build(cfg.n_h + cfg.n_z, n_obs, hidden), rng=rng)
        self.reward_decoder = Mlp(MlpSpec.build(cfg.n_h + cfg.n_z, 1, hidden), rng=rng)
        self.done_decoder = Mlp(MlpSpec.build(cfg.n_h + cfg.n_z, 1, hidden), rng=rng)
        for name, module in zip(SUBMODULES, self.modules()):
            self.params.update(prefixed(name, module.params))

    def modules(self):
        return (self.gru, self.prior, self.posterior, self.obs_decoder, self.reward_decoder, self.done_decoder)

    def scaled(self, actions):
        return np.asarray(actions, dtype=np.float64) / self.action_scale

    def initial_h(self, batch):
        zeros = np.zeros((batch, self.n_z + self.n_action))
        return self.gru.forward(zeros, self.gru.initial_state(batch))[0]

    def rssm_step(self, h_prev, z_prev, action, observation=None, noise=None, rng=None):
        """
        Advance one latent step. With an observation the posterior is sampled, otherwise the prior.

        Zero noise (or noise=None without an rng) gives the distribution mean.
        """
        x = np.concatenate([z_prev, self.scaled(action)], axis=1)
        h, _ = self.gru.forward(x, h_prev)
        prior_mean, prior_log_std, _ = split_gaussian(self.prior(h), self.n_z)
        post_mean = post_log_std = None
        if observation is not None:
            observation = as_batch(observation, self.n_obs, 'observation')
            post_mean, post_log_std, _ = split_gaussian(
                self.posterior(np.concatenate([h, observation], axis=1)), self.n_z,
            )
            mean, log_std = post_mean, post_log_std
        else:
            mean, log_std = prior_mean, prior_log_std
        if noise is None:
            noise = rng.standard_normal(mean.shape) if rng is not None else np.zeros_like(mean)
        z = mean + np.exp(log_std) * noise
        return RssmState(h=h, z=z, prior_mean=prior_mean, prior_log_std=prior_log_std,
                         post_mean=post_mean, post_log_std=post_log_std)

    def decode(self, h, z):
        hz = np.concatenate([h, z], axis=1)
        return self.obs_decoder(hz), self.reward_decoder(hz)[:, 0], expit(self.done_decoder(hz)[:, 0])

    def loss_and_grads(self, batch, rng=None, noise=None, with_grads=True):
        """
        Sequence loss: reconstruction + lambda_r reward error + beta KL + lambda_d done BCE,
        each averaged over batch and time. Returns (total, components, grads).
        """
        cfg = self.cfg
        b, length = batch.rewards.shape
        n_h, n_z = self.n_h, self.n_z
        if noise is None:
            noise = rng.standard_normal((b, length + 1, n_z))
        n_latent, n_trans = b * (length + 1), b * length

        h_prev = self.gru.initial_state(b)
        z_prev = np.zeros((b, n_z))
        a_prev = np.zeros((b, self.n_action))
        steps = []
        recon = reward_err = kl_total = done_bce = 0.0
        for t in range(length + 1):
            h, gcache = self.gru.forward(np.concatenate([z_prev, a_prev], axis=1), h_prev)
            p_out, pcache = self.prior.forward(h)
            mp, lp, mask_p = split_gaussian(p_out, n_z)
            q_out, qcache = self.posterior.forward(np.concatenate([h, batch.obs[:, t]], axis=1))
            mq, lq, mask_q = split_gaussian(q_out, n_z)
            std_q = np.exp(lq)
            z = mq + std_q * noise[:, t]
            hz = np.concatenate([h, z], axis=1)
            obs_hat, ocache = self.obs_decoder.forward(hz)
            err = obs_hat - batch.obs[:, t]
            recon += np.sum(err * err)
            kl_total += np.sum(gaussian_kl(mq, lq, mp, lp))
            step = dict(gcache=gcache, pcache=pcache, qcache=qcache, ocache=ocache, err=err,
                        mp=mp, lp=lp, mask_p=mask_p, mq=mq, lq=lq, mask_q=mask_q, std_q=std_q, eps=noise[:, t])
            if t >= 1:
                r_hat, rcache = self.reward_decoder.forward(hz)
                d_logit, dcache = self.done_decoder.forward(hz)
                r_err = r_hat[:, 0] - batch.rewards[:, t - 1]
                d = batch.dones[:, t - 1]
                reward_err += np.sum(r_err * r_err)
                done_bce += np.sum(np.logaddexp(0.0, d_logit[:, 0]) - d * d_logit[:, 0])
                step.update(rcache=rcache, dcache=dcache, r_err=r_err, d_prob=expit(d_logit[:, 0]), d=d)
            steps.append(step)
            h_prev, z_prev = h, z
            if t < length:
                a_prev = self.scaled(batch.actions[:, t])

        components = {
            'reconstruction': recon / n_latent,
            'reward': reward_err / n_trans,
            'kl': kl_total / n_latent,
            'done': done_bce / n_trans,
        }
        total = (components['reconstruction'] + cfg.lambda_r * components['reward']
                 + cfg.beta_kl * components['kl'] + cfg.lambda_d * components['done'])
        if not with_grads:
            return total, components, None

        grads = self.zero_grads()

        def accumulate(prefix, module_grads):
            for key, value in module_grads.items():
                grads[f'{prefix}.{key}'] += value

        carry_h = np.zeros((b, n_h))
        carry_z = np.zeros((b, n_z))
        for t in reversed(range(length + 1)):
            s = steps[t]
            g, d_hz = self.obs_decoder.backward(2.0 * s['err'] / n_latent, s['ocache'])
            accumulate('obs', g)
            if t >= 1:
                g, d_in = self.reward_decoder.backward(cfg.lambda_r * 2.0 * s['r_err'][:, None] / n_trans, s['rcache'])
                accumulate('reward', g)
                d_hz = d_hz + d_in
                g, d_in = self.done_decoder.backward(cfg.lambda_d * (s['d_prob'] - s['d'])[:, None] / n_trans, s['dcache'])
                accumulate('done', g)
                d_hz = d_hz + d_in
            d_h = carry_h + d_hz[:, :n_h]
            d_z = carry_z + d_hz[:, n_h:]

            kl_mq, kl_lq, kl_mp, kl_lp = gaussian_kl_grads(s['mq'], s['lq'], s['mp'], s['lp'])
            scale = cfg.beta_kl / n_latent
            d_mq = d_z + scale * kl_mq
            d_lq = (d_z * s['std_q'] * s['eps'] + scale * kl_lq) * s['mask_q']
            d_mp = scale * kl_mp
            d_lp = scale * kl_lp * s['mask_p']

            g, d_in = self.posterior.backward(np.concatenate([d_mq, d_lq], axis=1), s['qcache'])
            accumulate('posterior', g)
            d_h = d_h + d_in[:, :n_h]
            g, d_in = self.prior.backward(np.concatenate([d_mp, d_lp], axis=1), s['pcache'])
            accumulate('prior', g)
            d_h = d_h + d_in

            g, d_x, carry_h = self.gru.backward(s['gcache'], d_h)
            accumulate('gru', g)
            carry_z = d_x[:, :n_z]
        return total, components, grads

    def loss(self, batch, rng=None, noise=None):
        total, components, _ = self.loss_and_grads(batch, rng=rng, noise=noise, with_grads=False)
        return total, components

    def predict_next(self, states, actions, h=None):
        """
        Deterministic one-step prediction (s_hat_{t+1}, r_hat_t) from (s_t, a_t).

        h is the filtered deterministic state at t; without context the first-step state is used.
        """
        states = as_batch(states, self.n_obs, 'state')
        actions = as_batch(actions, self.n_action, 'action')
        h = self.initial_h(len(states)) if h is None else h
        post_mean, _, _ = split_gaussian(self.posterior(np.concatenate([h, states], axis=1)), self.n_z)
        nxt = self.rssm_step(h, post_mean, actions)
        obs_hat, reward_hat, done_prob = self.decode(nxt.h, nxt.prior_mean)
        return Prediction(next_states=obs_hat, rewards=reward_hat, done_probs=done_prob, h=nxt.h)

    def filter_trajectory(self, states, actions, dones):
        """
        Walk a (possibly multi-episode) trajectory once, carrying the filtered state.

        Returns one-step predictions for every transition, the posterior-prior KL at every
        state, and the (h, z) latent pair of every state for imagination starts.
        """
        n = len(states)
        next_states = np.zeros((n, self.n_obs))
        rewards = np.zeros(n)
        kl = np.zeros(n)
        hs = np.zeros((n, self.n_h))
        zs = np.zeros((n, self.n_z))
        h = self.initial_h(1)
        for t in range(n):
            prior_mean, prior_log_std, _ = split_gaussian(self.prior(h), self.n_z)
            post_mean, post_log_std, _ = split_gaussian(
                self.posterior(np.concatenate([h, states[t:t + 1]], axis=1)), self.n_z,
            )
            kl[t] = gaussian_kl(post_mean, post_log_std, prior_mean, prior_log_std)[0]
            hs[t], zs[t] = h[0], post_mean[0]
            nxt = self.rssm_step(h, post_mean, actions[t:t + 1])
            obs_hat, reward_hat, _ = self.decode(nxt.h, nxt.prior_mean)
            next_states[t], rewards[t] = obs_hat[0], reward_hat[0]
            h = self.initial_h(1) if dones[t] else nxt.h
        return next_states, rewards, kl, hs, zs


def boosted_targets(rewards, next_values, dones, model_rewards, model_next_values, gamma, lambda_wm):
    """Blend of real and model-based one-step TD targets; lambda_wm = 0 is the plain TD target."""
    real = td_targets(rewards, next_values, dones, gamma)
    if lambda_wm == 0.0:
        return real
    model = td_targets(model_rewards, model_next_values, dones, gamma)
    return (1.0 - lambda_wm) * real + lambda_wm * model


def select_low_uncertainty(scores, fraction):
    """Indices of the floor(fraction * N) lowest-uncertainty states, lowest first."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f'selection fraction must lie in [0, 1], got {fraction}')
    count = int(np.floor(fraction * len(scores)))
    return np.argsort(scores, kind='stable')[:count]


@dataclass
class Imagined:
    states: np.ndarray
    u: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self):
        return len(self.returns)


def imagine(model, start_h, start_z, actor, critic, horizon, gamma, rng):
    """
    Roll the prior forward `horizon` steps from latent starts, sampling actions from the actor.

    G = sum_t gamma^t R_t + gamma^H V(S_H); advantages G - V(S_t) are plain arrays (no gradient).
    """
    if horizon < 1:
        raise ValueError('imagination horizon must be >= 1')
    n = len(start_h)
    states = np.zeros((n, horizon, model.n_obs))
    u = np.zeros((n, horizon, model.n_action))
    rewards = np.zeros((n, horizon))
    values = np.zeros((n, horizon))
    h, z = start_h, start_z
    obs = model.decode(h, z)[0]
    for t in range(horizon):
        states[:, t] = obs
        values[:, t] = critic.value(obs)
        sample = actor.sample(obs, rng)
        u[:, t] = sample.u
        nxt = model.rssm_step(h, z, sample.action, rng=rng)
        h, z = nxt.h, nxt.z
        obs, rewards[:, t], _ = model.decode(h, z)
    returns = critic.value(obs) * gamma ** horizon
    for t in reversed(range(horizon)):
        returns = returns + gamma ** t * rewards[:, t]
    return Imagined(states=states, u=u, rewards=rewards, returns=returns, advantages=returns[:, None] - values)


def imagination_loss(imagined, actor, eta):
    """eta * mean over imagined steps of -(G - V(S_t)) log pi(A_t | S_t); gradients reach the actor only."""
    grads = actor.zero_grads()
    if eta == 0.0 or imagined is None or len(imagined) == 0:
        return 0.0, grads
    states = imagined.states.reshape(-1, imagined.states.shape[-1])
    u = imagined.u.reshape(-1, imagined.u.shape[-1])
    advantages = imagined.advantages.ravel()
    logp, mean, cache = actor.log_prob(states, u)
    loss = float(eta * np.mean(-advantages * logp))
    grads = actor.log_prob_backward(u, mean, cache, -eta * advantages / len(advantages))
    return loss, grads


class EpisodeReplay:
    """Bounded store of recent episodes for world-model minibatches."""

    def __init__(self, capacity):
        self.episodes = deque(maxlen=capacity)

    def __len__(self):
        return len(self.episodes)

    def add(self, states, actions, rewards, dones, last_state):
        self.episodes.append({
            'obs': np.vstack([states, last_state[None, :]]),
            'actions': np.asarray(actions, dtype=np.float64),
            'rewards': np.asarray(rewards, dtype=np.float64),
            'dones': np.asarray(dones, dtype=np.float64),
        })

    def sample(self, rng, seq_len, batch_size):
        if not self.episodes:
            raise ValueError('replay is empty')
        length = min(seq_len, min(len(ep['rewards']) for ep in self.episodes))
        obs, actions, rewards, dones = [], [], [], []
        for _ in range(batch_size):
            ep = self.episodes[int(rng.integers(len(self.episodes)))]
            start = int(rng.integers(len(ep['rewards']) - length + 1))
            obs.append(ep['obs'][start:start + length + 1])
            actions.append(ep['actions'][start:start + length])
            rewards.append(ep['rewards'][start:start + length])
            dones.append(ep['dones'][start:start + length])
        return WmBatch(obs=np.stack(obs), actions=np.stack(actions), rewards=np.stack(rewards), dones=np.stack(dones))

    def to_dict(self):
        return [{key: value.tolist() for key, value in ep.items()} for ep in self.episodes]

    def load(self, episodes):
        self.episodes.clear()
        for ep in episodes:
            self.episodes.append({key: np.asarray(value, dtype=np.float64) for key, value in ep.items()})
