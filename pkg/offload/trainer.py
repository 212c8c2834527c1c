"""
Training loop for the offloading agents, static baselines, evaluation and comparison tables.

One environment episode is collected per iteration. Every learner owns separate random streams for
network init, world-model init, action sampling, minibatch shuffling, world-model batches and
imagination so that switching the world model off leaves the PPO streams untouched.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import MecEnv, write_trace
from .nn import Adam, HeadSample, load_checkpoint, save_checkpoint
from .ppo import PpoBatch, Trajectory, build_agent, gae_advantages, lambda_returns, ppo_update
from .world_model import (
    EpisodeReplay, WorldModel, boosted_targets, imagination_loss, imagine, select_low_uncertainty,
)

logger = logging.getLogger(__name__)

LEARNERS = ('wm-ppo', 'ppo')
BASELINES = ('always-local', 'always-offload')
POLICIES = LEARNERS + BASELINES

CONVERGENCE_WINDOW = 20
CONVERGENCE_TOLERANCE = 0.01

# Share of evaluation episodes a learner must keep within the QoS constraints
ACCEPTANCE_SATISFACTION = 0.9

# Offsets into the seed sequence for streams that must not interfere with training
EVAL_STREAM = 1
TASK_SWEEP_STREAM = 2


class StaticPolicy:
    """Fixed offloading ratio and power fraction for every MLU."""

    def __init__(self, name, alpha, power_fraction, p_max):
        self.name = name
        n = len(p_max)
        self.action = np.concatenate([np.full(n, float(alpha)), power_fraction * np.asarray(p_max)])

    @classmethod
    def for_baseline(cls, name, p_max):
        if name == 'always-local':
            return cls(name, 0.0, 0.0, p_max)
        if name == 'always-offload':
            return cls(name, 1.0, 1.0, p_max)
        raise ValueError(f'unknown baseline {name!r}')

    def sample(self, states, rng):
        batch = np.atleast_2d(states).shape[0]
        action = np.tile(self.action, (batch, 1))
        return HeadSample(u=np.zeros_like(action), action=action, log_prob=np.zeros(batch))

    def mean_action(self, states):
        return np.tile(self.action, (np.atleast_2d(states).shape[0], 1))


def collect(env, policy, rng, critic=None, deterministic=False):
    """Run one episode; returns the trajectory and the per-slot step outcomes."""
    obs = env.observe(env.reset())
    rows = {name: [] for name in Trajectory.__dataclass_fields__}
    outcomes = []
    while True:
        if deterministic:
            action = policy.mean_action(obs)[0]
            u, log_prob = np.zeros_like(action), 0.0
        else:
            sample = policy.sample(obs[None, :], rng)
            action, u, log_prob = sample.action[0], sample.u[0], float(sample.log_prob[0])
        outcome = env.step(action)
        next_obs = env.observe(outcome.next_state)
        rows['states'].append(obs)
        rows['u'].append(u)
        rows['actions'].append(action)
        rows['rewards'].append(outcome.reward)
        rows['dones'].append(float(outcome.done))
        rows['next_states'].append(next_obs)
        rows['log_probs'].append(log_prob)
        rows['values'].append(0.0)
        outcomes.append(outcome)
        obs = next_obs
        if outcome.done:
            break
    traj = Trajectory(**{name: np.array(values, dtype=np.float64) for name, values in rows.items()})
    if critic is not None:
        traj.values = critic.value(traj.states)
    return traj, outcomes


def episode_metrics(outcomes):
    """Per-episode means over slots and MLUs plus constraint-violation rates."""
    def stack(name):
        return np.array([o.diagnostics[name] for o in outcomes], dtype=np.float64)

    accuracy = stack('accuracy')
    hallucination = stack('hallucination')
    return {
        'reward_mean': float(np.mean([o.reward for o in outcomes])),
        'latency_mean': float(np.mean(stack('latency'))),
        'accuracy_mean': float(np.mean(accuracy)),
        'hallucination_mean': float(np.mean(hallucination)),
        'energy_mean': float(np.mean(stack('energy'))),
        'omega_mean': float(np.mean(stack('omega'))),
        'alpha_mean': float(np.mean(stack('alpha'))),
        'power_mean': float(np.mean(stack('power_w'))),
        'accuracy_violation_rate': float(np.mean(stack('omega_accuracy') > 0)),
        'hallucination_violation_rate': float(np.mean(stack('omega_hallucination') > 0)),
        'energy_violation_rate': float(np.mean(stack('omega_energy') > 0)),
    }


def convergence_iteration(rewards, window=CONVERGENCE_WINDOW, tolerance=CONVERGENCE_TOLERANCE):
    """First iteration where the moving-average reward moved by less than `tolerance` over one window."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) < 2 * window:
        return None
    averages = np.convolve(rewards, np.ones(window) / window, mode='valid')
    for i in range(window, len(averages)):
        previous = averages[i - window]
        if previous != 0 and abs(averages[i] - previous) / abs(previous) < tolerance:
            return i + window
    return None


def standard_error(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def summarize_episodes(episodes, qos):
    """Aggregate per-episode metrics into an evaluation report."""
    report = {'episodes': len(episodes)}
    for key in ('reward_mean', 'latency_mean', 'accuracy_mean', 'hallucination_mean', 'energy_mean', 'omega_mean'):
        values = [ep[key] for ep in episodes]
        report[key] = float(np.mean(values))
        report[key.replace('_mean', '_se')] = standard_error(values)
    report['accuracy_satisfaction'] = float(np.mean([ep['accuracy_mean'] >= qos.a_min for ep in episodes]))
    report['hallucination_satisfaction'] = float(np.mean([ep['hallucination_mean'] <= qos.h_max for ep in episodes]))
    report['energy_satisfaction'] = float(np.mean([ep['energy_violation_rate'] == 0.0 for ep in episodes]))
    return report


def evaluate(policy, system, seed, episodes, trace_dir=None, trace_episodes=0, config_hash='', task_scale_bits=None):
    """Deterministic mean-action rollouts on an evaluation stream independent of training."""
    env = MecEnv(system, np.random.SeedSequence([seed, EVAL_STREAM]), task_scale_bits=task_scale_bits)
    per_episode = []
    for episode in range(episodes):
        _, outcomes = collect(env, policy, None, deterministic=True)
        per_episode.append(episode_metrics(outcomes))
        if trace_dir is not None and episode < trace_episodes:
            write_trace(Path(trace_dir) / f'trace_episode_{episode}.csv', episode, outcomes, config_hash, seed)
    report = summarize_episodes(per_episode, system.qos)
    report['per_episode'] = per_episode
    return report


def run_baseline(name, system, seed, episodes, **kwargs):
    env = MecEnv(system, seed)
    return evaluate(StaticPolicy.for_baseline(name, env.p_max), system, seed, episodes, **kwargs)


@dataclass
class TrainResult:
    seed: int
    algorithm: str
    metrics: list = field(default_factory=list)
    convergence_iteration: int = None
    out_dir: Path = None


class Trainer:
    """Owns the networks, optimizers and random streams of one learner on one seed."""

    def __init__(self, config, seed, algorithm=None, system=None, out_dir=None):
        self.config = config
        self.seed = int(seed)
        self.algorithm = algorithm or config.algorithm
        if self.algorithm not in LEARNERS:
            raise ValueError(f'{self.algorithm!r} is not a learning algorithm; use run_baseline')
        self.system = system or config.system
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.iteration = 0

        self.env = MecEnv(self.system, self.seed)
        streams = np.random.SeedSequence(self.seed).spawn(6)
        init_rng, wm_init_rng, self.actor_rng, self.shuffle_rng, self.wm_rng, self.imagine_rng = (
            np.random.default_rng(s) for s in streams
        )
        ppo = config.ppo
        self.actor, self.critic, self.actor_opt, self.critic_opt = build_agent(
            self.env.observation_size, self.env.action_size, self.env.action_scale, ppo, init_rng,
        )
        self.world_model = self.wm_opt = self.replay = None
        if self.algorithm == 'wm-ppo':
            wm = config.world_model
            self.world_model = WorldModel(
                self.env.observation_size, self.env.action_size, self.env.action_scale, wm, rng=wm_init_rng,
            )
            self.wm_opt = Adam(self.world_model, wm.lr, max_grad_norm=wm.max_grad_norm)
            self.replay = EpisodeReplay(wm.replay_episodes)

    @property
    def config_hash(self):
        return self.config.hash

    def rngs(self):
        return {
            'env': self.env.rng, 'actor': self.actor_rng, 'shuffle': self.shuffle_rng,
            'wm': self.wm_rng, 'imagine': self.imagine_rng,
        }

    def update_world_model(self):
        wm = self.config.world_model
        totals = {'wm_loss': 0.0, 'wm_reconstruction': 0.0, 'wm_reward': 0.0, 'wm_kl': 0.0, 'wm_done': 0.0}
        for _ in range(wm.updates_per_iteration):
            batch = self.replay.sample(self.wm_rng, wm.seq_len, wm.batch_size)
            loss, components, grads = self.world_model.loss_and_grads(batch, rng=self.wm_rng)
            self.wm_opt.step(grads)
            totals['wm_loss'] += loss
            for key, value in components.items():
                totals[f'wm_{key}'] += value
        count = max(wm.updates_per_iteration, 1)
        return {key: value / count for key, value in totals.items()}

    def train_iteration(self):
        """Collect one episode, update the world model, form targets, update critic and actor."""
        ppo, wm = self.config.ppo, self.config.world_model
        traj, outcomes = collect(self.env, self.actor, self.actor_rng)
        values = self.critic.value(traj.states)
        next_values = self.critic.value(traj.next_states)
        auxiliary = None
        extra = {}

        if self.algorithm == 'ppo':
            advantages = gae_advantages(traj.rewards, values, next_values, traj.dones, ppo.gamma, ppo.gae_lambda)
            targets = lambda_returns(traj.rewards, values, next_values, traj.dones, ppo.gamma, ppo.gae_lambda)
        else:
            self.replay.add(traj.states, traj.actions, traj.rewards, traj.dones, traj.next_states[-1])
            extra.update(self.update_world_model())
            imagining = wm.eta > 0.0 and wm.select_fraction > 0.0
            model_rewards = model_next_values = None
            if wm.lambda_wm > 0.0 or imagining:
                model_next, model_rewards, kl, hs, zs = self.world_model.filter_trajectory(
                    traj.states, traj.actions, traj.dones,
                )
                model_next_values = self.critic.value(model_next)
                extra['uncertainty_mean'] = float(np.mean(kl))
            targets = boosted_targets(
                traj.rewards, next_values, traj.dones, model_rewards, model_next_values, ppo.gamma, wm.lambda_wm,
            )
            advantages = targets - values
            if imagining:
                index = select_low_uncertainty(kl, wm.select_fraction)
                if len(index):
                    imagined = imagine(
                        self.world_model, hs[index], zs[index], self.actor, self.critic,
                        wm.horizon, ppo.gamma, self.imagine_rng,
                    )
                    extra['imagined_starts'] = int(len(index))
                    extra['imagined_return_mean'] = float(np.mean(imagined.returns))

                    def auxiliary(actor):
                        return imagination_loss(imagined, actor, wm.eta)

        batch = PpoBatch(traj.states, traj.u, traj.log_probs, advantages, targets)
        report = ppo_update(
            self.actor, self.critic, self.actor_opt, self.critic_opt, batch, ppo, self.shuffle_rng, auxiliary,
        )
        self.iteration += 1
        metrics = {
            'iteration': self.iteration,
            'seed': self.seed,
            'algorithm': self.algorithm,
            'config_hash': self.config_hash,
            **episode_metrics(outcomes),
            **report,
            **extra,
        }
        if 'wm_loss' in extra:
            metrics['critic_objective'] = report['critic_loss'] + wm.lambda_wm * extra['wm_loss']
        logger.info(
            '%s seed=%d iter=%d reward=%.4f latency=%.4f acc=%.3f hall=%.3f',
            self.algorithm, self.seed, self.iteration, metrics['reward_mean'], metrics['latency_mean'],
            metrics['accuracy_mean'], metrics['hallucination_mean'],
        )
        return metrics

    def modules(self):
        modules = {'actor': self.actor, 'critic': self.critic}
        optimizers = {'actor': self.actor_opt, 'critic': self.critic_opt}
        if self.world_model is not None:
            modules['world_model'] = self.world_model
            optimizers['world_model'] = self.wm_opt
        return modules, optimizers

    def save(self, path):
        modules, optimizers = self.modules()
        extra = {
            'iteration': self.iteration,
            'seed': self.seed,
            'algorithm': self.algorithm,
            'config_hash': self.config_hash,
            'rng': {name: rng.bit_generator.state for name, rng in self.rngs().items()},
            'replay': self.replay.to_dict() if self.replay is not None else None,
        }
        save_checkpoint(path, modules, optimizers, extra)

    def load(self, path):
        modules, optimizers = self.modules()
        extra = load_checkpoint(path, modules, optimizers)
        if extra.get('algorithm') != self.algorithm:
            raise ValueError(f'checkpoint was written by {extra.get("algorithm")!r}, not {self.algorithm!r}')
        for name, rng in self.rngs().items():
            rng.bit_generator.state = extra['rng'][name]
        if self.replay is not None and extra.get('replay') is not None:
            self.replay.load(extra['replay'])
        self.iteration = int(extra['iteration'])
        return extra

    def _existing_metrics(self, path):
        if not path.exists():
            return []
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return rows[:self.iteration]

    def run(self, iterations=None, resume=False):
        """Train up to `iterations` total iterations, writing metrics and checkpoints when out_dir is set."""
        iterations = self.config.iterations if iterations is None else iterations
        metrics = []
        metrics_path = checkpoint_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / 'metrics.jsonl'
            checkpoint_path = self.out_dir / 'checkpoint.json'
            (self.out_dir / 'config.json').write_text(
                json.dumps({'config_hash': self.config_hash, 'seed': self.seed, 'config': self.config.raw},
                           indent=2, sort_keys=True) + '\n'
            )
            if resume and checkpoint_path.exists():
                self.load(checkpoint_path)
                metrics = self._existing_metrics(metrics_path)
                logger.info('resumed %s seed=%d at iteration %d', self.algorithm, self.seed, self.iteration)
            metrics_path.write_text(''.join(json.dumps(row, sort_keys=True) + '\n' for row in metrics))

        while self.iteration < iterations:
            row = self.train_iteration()
            metrics.append(row)
            if metrics_path is not None:
                with open(metrics_path, 'a') as handle:
                    handle.write(json.dumps(row, sort_keys=True) + '\n')
                if self.iteration % self.config.checkpoint_interval == 0:
                    self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
            write_summary(self.out_dir / 'summary.csv', metrics, self.config_hash, self.seed)
        converged = convergence_iteration([row['reward_mean'] for row in metrics])
        return TrainResult(
            seed=self.seed, algorithm=self.algorithm, metrics=metrics,
            convergence_iteration=converged, out_dir=self.out_dir,
        )

    def evaluate(self, episodes=None, trace_dir=None, system=None, task_scale_bits=None):
        config = self.config
        return evaluate(
            self.actor, system or self.system, self.seed, episodes or config.eval_episodes,
            trace_dir=trace_dir, trace_episodes=config.trace_episodes if trace_dir else 0,
            config_hash=self.config_hash, task_scale_bits=task_scale_bits,
        )


SUMMARY_FIELDS = (
    'iteration', 'reward_mean', 'latency_mean', 'accuracy_mean', 'hallucination_mean', 'energy_mean',
    'omega_mean', 'actor_loss', 'critic_loss', 'clip_fraction', 'approx_kl', 'wm_loss',
)


def write_summary(path, metrics, config_hash, seed):
    with open(path, 'w', newline='') as handle:
        handle.write(f'# config_hash={config_hash} seed={seed}\n')
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_FIELDS, extrasaction='ignore')
        writer.writeheader()
        for row in metrics:
            writer.writerow({key: row.get(key, '') for key in SUMMARY_FIELDS})


def parallel_map(fn, items, workers):
    """Map over items on a thread pool; results come back in item order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_seeds(config, out_dir=None, algorithm=None, iterations=None, resume=False, workers=1):
    """Train one learner per configured seed; returns (results, trainers) in seed order."""
    def train_one(seed):
        seed_dir = Path(out_dir) / f'seed_{seed}' if out_dir is not None else None
        trainer = Trainer(config, seed, algorithm=algorithm, out_dir=seed_dir)
        return trainer.run(iterations=iterations, resume=resume), trainer

    pairs = parallel_map(train_one, list(config.seeds), workers)
    return [p[0] for p in pairs], [p[1] for p in pairs]


COMPARISON_FIELDS = (
    'num_mlus', 'policy', 'seeds', 'latency_mean', 'latency_se', 'reward_mean', 'reward_se',
    'accuracy_mean', 'accuracy_se', 'hallucination_mean', 'hallucination_se', 'energy_mean',
    'accuracy_satisfaction', 'hallucination_satisfaction', 'energy_satisfaction',
)


@dataclass
class Comparison:
    rows: list
    qos_rows: list
    task_size_rows: list
    evaluations: list


def _pooled(reports):
    return [ep for report in reports for ep in report['per_episode']]


def compare_policies(config, workers=1, iterations=None):
    """
    Train both learners and evaluate all four policies on shared seeds, for every K in k_values.

    Returns latency/QoS rows per (K, policy), per-episode QoS rows and the optional
    reward-vs-task-size sweep evaluated at the configured K.
    """
    rows, qos_rows, evaluations, task_rows = [], [], [], []
    k_values = config.k_values or (config.system.num_mlus,)
    for k in k_values:
        system = config.system.with_mlus(k)
        trained = {}
        for algorithm in LEARNERS:
            def train_one(seed, algorithm=algorithm, system=system):
                trainer = Trainer(config, seed, algorithm=algorithm, system=system)
                result = trainer.run(iterations=iterations)
                return result, trainer
            trained[algorithm] = parallel_map(train_one, list(config.seeds), workers)
            for result, _ in trained[algorithm]:
                for row in result.metrics:
                    qos_rows.append({
                        'num_mlus': k, 'policy': algorithm, 'seed': result.seed, 'episode': row['iteration'],
                        'accuracy': row['accuracy_mean'], 'hallucination': row['hallucination_mean'],
                    })
        for policy in POLICIES:
            if policy in LEARNERS:
                reports = [trainer.evaluate() for _, trainer in trained[policy]]
            else:
                reports = [run_baseline(policy, system, seed, config.eval_episodes) for seed in config.seeds]
                for seed, report in zip(config.seeds, reports):
                    for episode, ep in enumerate(report['per_episode']):
                        qos_rows.append({
                            'num_mlus': k, 'policy': policy, 'seed': seed, 'episode': episode + 1,
                            'accuracy': ep['accuracy_mean'], 'hallucination': ep['hallucination_mean'],
                        })
            for seed, report in zip(config.seeds, reports):
                evaluations.append({'num_mlus': k, 'policy': policy, 'seed': seed, 'report': report})
            summary = summarize_episodes(_pooled(reports), system.qos)
            rows.append({
                'num_mlus': k, 'policy': policy, 'seeds': ' '.join(str(s) for s in config.seeds),
                **{key: summary[key] for key in COMPARISON_FIELDS if key in summary},
            })
            if k == k_values[0]:
                task_rows.extend(_task_size_rows(config, system, policy, trained.get(policy)))
    return Comparison(rows=rows, qos_rows=qos_rows, task_size_rows=task_rows, evaluations=evaluations)


def _ordered(high, low, key):
    """True when high[key] >= low[key] up to the larger standard error of the two rows."""
    se_key = key.replace('_mean', '_se')
    tolerance = max(high.get(se_key, 0.0), low.get(se_key, 0.0))
    return bool(high[key] + tolerance >= low[key]), tolerance


def acceptance_checks(rows, satisfaction=ACCEPTANCE_SATISFACTION):
    """
    Check the comparison rows for each K: the learners meet the accuracy and hallucination
    constraints in at least `satisfaction` of the evaluation episodes, their QoS lies between
    the two static baselines, and world-model PPO is not slower than vanilla PPO.

    A row may be missing a policy; checks that need it are skipped.
    """
    results = []

    def check(name, k, value, expected, tolerance, passed):
        results.append({
            'check': name, 'num_mlus': k, 'value': value, 'expected': expected,
            'tolerance': tolerance, 'passed': bool(passed),
        })

    for k in sorted({row['num_mlus'] for row in rows}):
        by_policy = {row['policy']: row for row in rows if row['num_mlus'] == k}
        local, edge = by_policy.get('always-local'), by_policy.get('always-offload')
        for learner in LEARNERS:
            row = by_policy.get(learner)
            if row is None:
                continue
            met = min(row['accuracy_satisfaction'], row['hallucination_satisfaction'])
            check(f'constraints:{learner}', k, met, satisfaction, 0.0, met >= satisfaction)
            if local is None or edge is None:
                continue
            upper, upper_se = _ordered(edge, row, 'accuracy_mean')
            lower, lower_se = _ordered(row, local, 'accuracy_mean')
            check(
                f'accuracy_order:{learner}', k, row['accuracy_mean'],
                [local['accuracy_mean'], edge['accuracy_mean']], max(upper_se, lower_se), upper and lower,
            )
            upper, upper_se = _ordered(local, row, 'hallucination_mean')
            lower, lower_se = _ordered(row, edge, 'hallucination_mean')
            check(
                f'hallucination_order:{learner}', k, row['hallucination_mean'],
                [edge['hallucination_mean'], local['hallucination_mean']], max(upper_se, lower_se), upper and lower,
            )
        if 'wm-ppo' in by_policy and 'ppo' in by_policy:
            wm, vanilla = by_policy['wm-ppo'], by_policy['ppo']
            check('latency_order', k, wm['latency_mean'], vanilla['latency_mean'], 0.0,
                  wm['latency_mean'] <= vanilla['latency_mean'])
    for result in results:
        logger.info('acceptance K=%s %s: %s', result['num_mlus'], result['check'], 'ok' if result['passed'] else 'FAILED')
    return results


def _task_size_rows(config, system, policy, trained):
    rows = []
    scale = system.task_size_bits[1]
    for size in config.task_size_sweep_mbit:
        swept = replace(system, task_size_bits=(size * 1e6, size * 1e6))
        reports = []
        for seed in config.seeds:
            if trained is not None:
                trainer = next(t for r, t in trained if r.seed == seed)
                policy_obj = trainer.actor
            else:
                policy_obj = StaticPolicy.for_baseline(policy, MecEnv(swept, seed).p_max)
            reports.append(evaluate(
                policy_obj, swept, seed * 1000 + TASK_SWEEP_STREAM, config.eval_episodes, task_scale_bits=scale,
            ))
        summary = summarize_episodes(_pooled(reports), swept.qos)
        rows.append({
            'num_mlus': system.num_mlus, 'policy': policy, 'task_size_mbit': size,
            'reward_mean': summary['reward_mean'], 'reward_se': summary['reward_se'],
            'latency_mean': summary['latency_mean'],
        })
    return rows


def write_rows(path, rows, fields, config_hash, seed):
    with open(path, 'w', newline='') as handle:
        handle.write(f'# config_hash={config_hash} seed={seed}\n')
        writer = csv.DictWriter(handle, fieldnames=fields, extrasaction='ignore')
        writer.writeheader()
        writer.writerows(rows)
