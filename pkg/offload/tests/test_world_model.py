import numpy as np
from django.test import SimpleTestCase
from scipy.stats import norm

from offload.config import WmConfig
from offload.nn import Adam
from offload.ppo import GaussianPolicy, ValueCritic, td_targets
from offload.world_model import (
    EpisodeReplay, Imagined, WmBatch, WorldModel, boosted_targets, gaussian_kl, gaussian_kl_grads, imagination_loss,
    imagine, select_low_uncertainty,
)

from .gradcheck import assert_grads_close, numeric_grad

N_OBS, N_ACTION = 3, 2
SCALE = np.array([1.0, 2.0])
CFG = WmConfig(n_h=4, n_z=2, hidden=(5,), lambda_r=0.7, beta_kl=0.9, lambda_d=0.2)


def random_batch(rng, batch=2, length=3):
    return WmBatch(
        obs=rng.standard_normal((batch, length + 1, N_OBS)),
        actions=rng.uniform(0.0, 1.0, (batch, length, N_ACTION)) * SCALE,
        rewards=rng.standard_normal((batch, length)),
        dones=(rng.uniform(size=(batch, length)) < 0.3).astype(float),
    )


class KlTests(SimpleTestCase):
    def test_identical_gaussians(self):
        mean, log_std = np.array([[0.3, -1.0]]), np.array([[0.2, -0.4]])
        np.testing.assert_allclose(gaussian_kl(mean, log_std, mean, log_std), 0.0, atol=1e-15)

    def test_shifted_unit_gaussian(self):
        self.assertAlmostEqual(float(gaussian_kl(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))[0]), 0.5)

    def test_gradients(self):
        rng = np.random.default_rng(0)
        args = [rng.standard_normal((3, 2)) * 0.5 for _ in range(4)]
        analytic = gaussian_kl_grads(*args)
        for index in range(4):
            expected = numeric_grad(lambda: float(np.sum(gaussian_kl(*args))), args[index])
            np.testing.assert_allclose(analytic[index], expected, rtol=1e-5, atol=1e-8)


class WorldModelTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=self.rng)
        self.batch = random_batch(self.rng)
        self.noise = self.rng.standard_normal((2, 4, CFG.n_z))

    def test_sequence_loss_gradients_match_finite_differences(self):
        _, components, grads = self.model.loss_and_grads(self.batch, noise=self.noise)
        self.assertEqual(set(components), {'reconstruction', 'reward', 'kl', 'done'})
        assert_grads_close(
            self, lambda: self.model.loss(self.batch, noise=self.noise)[0], self.model.params, grads,
        )

    def test_training_reduces_loss(self):
        opt = Adam(self.model, 1e-2)
        before = self.model.loss(self.batch, noise=self.noise)[0]
        for _ in range(30):
            opt.step(self.model.loss_and_grads(self.batch, noise=self.noise)[2])
        self.assertLess(self.model.loss(self.batch, noise=self.noise)[0], before)

    def test_prior_step_without_rng_uses_the_mean(self):
        h = self.model.initial_h(2)
        step = self.model.rssm_step(h, np.zeros((2, CFG.n_z)), np.zeros((2, N_ACTION)))
        np.testing.assert_allclose(step.z, step.prior_mean)
        self.assertIsNone(step.post_mean)

    def test_posterior_step(self):
        h = self.model.initial_h(1)
        step = self.model.rssm_step(h, np.zeros((1, CFG.n_z)), np.zeros((1, N_ACTION)), observation=np.ones(N_OBS))
        np.testing.assert_allclose(step.z, step.post_mean)

    def test_predict_next_shapes(self):
        prediction = self.model.predict_next(np.zeros((4, N_OBS)), np.zeros((4, N_ACTION)))
        self.assertEqual(prediction.next_states.shape, (4, N_OBS))
        self.assertEqual(prediction.rewards.shape, (4,))
        self.assertTrue(np.all((prediction.done_probs > 0) & (prediction.done_probs < 1)))

    def test_filter_trajectory(self):
        states = self.rng.standard_normal((6, N_OBS))
        actions = self.rng.uniform(size=(6, N_ACTION))
        dones = np.array([0, 0, 1, 0, 0, 1], dtype=float)
        next_states, rewards, kl, hs, zs = self.model.filter_trajectory(states, actions, dones)
        self.assertEqual(next_states.shape, (6, N_OBS))
        self.assertEqual(rewards.shape, (6,))
        self.assertTrue(np.all(kl >= 0))
        self.assertEqual(hs.shape, (6, CFG.n_h))
        self.assertEqual(zs.shape, (6, CFG.n_z))
        # the filter restarts after an episode boundary
        np.testing.assert_allclose(hs[3], hs[0])

    def test_misaligned_batch_is_rejected(self):
        with self.assertRaises(ValueError):
            WmBatch(obs=np.zeros((2, 3, N_OBS)), actions=np.zeros((2, 3, N_ACTION)), rewards=np.zeros((2, 3)), dones=np.zeros((2, 3)))


class TargetTests(SimpleTestCase):
    def setUp(self):
        self.rewards = np.array([1.0, 0.5])
        self.next_values = np.array([2.0, 3.0])
        self.dones = np.array([0.0, 1.0])
        self.model_rewards = np.array([0.8, 0.1])
        self.model_next_values = np.array([1.0, 4.0])

    def targets(self, lambda_wm):
        return boosted_targets(
            self.rewards, self.next_values, self.dones, self.model_rewards, self.model_next_values, 0.9, lambda_wm,
        )

    def test_zero_weight_is_the_real_td_target(self):
        np.testing.assert_array_equal(self.targets(0.0), td_targets(self.rewards, self.next_values, self.dones, 0.9))
        np.testing.assert_array_equal(
            boosted_targets(self.rewards, self.next_values, self.dones, None, None, 0.9, 0.0),
            td_targets(self.rewards, self.next_values, self.dones, 0.9),
        )

    def test_unit_weight_is_the_model_td_target(self):
        np.testing.assert_allclose(self.targets(1.0), [0.8 + 0.9 * 1.0, 0.1])

    def test_blend(self):
        np.testing.assert_allclose(self.targets(0.5), 0.5 * self.targets(0.0) + 0.5 * self.targets(1.0))


class SelectionTests(SimpleTestCase):
    def test_lowest_scores_first_with_stable_ties(self):
        np.testing.assert_array_equal(select_low_uncertainty([0.3, 0.1, 0.2, 0.1], 0.5), [1, 3])

    def test_fraction_floors(self):
        self.assertEqual(len(select_low_uncertainty(np.arange(10.0), 0.25)), 2)
        self.assertEqual(len(select_low_uncertainty(np.arange(10.0), 0.0)), 0)
        self.assertEqual(len(select_low_uncertainty(np.arange(10.0), 1.0)), 10)

    def test_fraction_outside_unit_interval(self):
        with self.assertRaises(ValueError):
            select_low_uncertainty([0.1], 1.5)


class ImaginationTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.rng = rng
        self.model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=rng)
        self.actor = GaussianPolicy(N_OBS, N_ACTION, SCALE, hidden=(5,), rng=rng)
        self.critic = ValueCritic(N_OBS, hidden=(5,), rng=rng)
        self.start_h = rng.standard_normal((4, CFG.n_h)) * 0.1
        self.start_z = rng.standard_normal((4, CFG.n_z)) * 0.1

    def test_rollout_shapes_and_returns(self):
        imagined = imagine(self.model, self.start_h, self.start_z, self.actor, self.critic, 3, 0.9, self.rng)
        self.assertEqual(imagined.states.shape, (4, 3, N_OBS))
        self.assertEqual(imagined.u.shape, (4, 3, N_ACTION))
        self.assertEqual(imagined.returns.shape, (4,))
        self.assertEqual(imagined.advantages.shape, (4, 3))
        np.testing.assert_allclose(
            imagined.advantages[:, 0], imagined.returns - self.critic.value(imagined.states[:, 0]),
        )

    def test_horizon_must_be_positive(self):
        with self.assertRaises(ValueError):
            imagine(self.model, self.start_h, self.start_z, self.actor, self.critic, 0, 0.9, self.rng)

    def test_zero_weight_contributes_nothing(self):
        imagined = imagine(self.model, self.start_h, self.start_z, self.actor, self.critic, 2, 0.9, self.rng)
        loss, grads = imagination_loss(imagined, self.actor, 0.0)
        self.assertEqual(loss, 0.0)
        self.assertTrue(all(not g.any() for g in grads.values()))

    def test_loss_gradients_reach_the_actor(self):
        imagined = imagine(self.model, self.start_h, self.start_z, self.actor, self.critic, 2, 0.9, self.rng)
        _, grads = imagination_loss(imagined, self.actor, 0.3)
        assert_grads_close(self, lambda: imagination_loss(imagined, self.actor, 0.3)[0], self.actor.params, grads)

    def test_empty_selection(self):
        empty = Imagined(np.zeros((0, 1, N_OBS)), np.zeros((0, 1, N_ACTION)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 1)))
        self.assertEqual(imagination_loss(empty, self.actor, 0.3)[0], 0.0)


class ReplayTests(SimpleTestCase):
    def add_episode(self, replay, rng, length=5):
        replay.add(
            rng.standard_normal((length, N_OBS)), rng.uniform(size=(length, N_ACTION)), rng.standard_normal(length),
            np.eye(1, length, length - 1)[0], rng.standard_normal(N_OBS),
        )

    def test_capacity_is_bounded(self):
        rng = np.random.default_rng(3)
        replay = EpisodeReplay(2)
        for _ in range(4):
            self.add_episode(replay, rng)
        self.assertEqual(len(replay), 2)

    def test_sample_shapes(self):
        rng = np.random.default_rng(4)
        replay = EpisodeReplay(4)
        self.add_episode(replay, rng)
        batch = replay.sample(rng, seq_len=3, batch_size=6)
        self.assertEqual(batch.obs.shape, (6, 4, N_OBS))
        self.assertEqual(batch.actions.shape, (6, 3, N_ACTION))
        short = replay.sample(rng, seq_len=50, batch_size=1)
        self.assertEqual(short.steps, 5)

    def test_empty_replay(self):
        with self.assertRaises(ValueError):
            EpisodeReplay(2).sample(np.random.default_rng(0), 3, 1)

    def test_serialized_replay_reloads(self):
        rng = np.random.default_rng(5)
        replay = EpisodeReplay(3)
        self.add_episode(replay, rng)
        restored = EpisodeReplay(3)
        restored.load(replay.to_dict())
        np.testing.assert_array_equal(restored.episodes[0]['obs'], replay.episodes[0]['obs'])


class KlMonteCarloTests(SimpleTestCase):
    def test_closed_form_matches_sampled_estimate(self):
        rng = np.random.default_rng(70)
        for _ in range(3):
            mean_q, mean_p = rng.standard_normal((2, 3))
            log_std_q, log_std_p = rng.uniform(-0.5, 0.5, (2, 3))
            x = mean_q + np.exp(log_std_q) * rng.standard_normal((1_000_000, 3))
            log_ratio = (norm.logpdf(x, mean_q, np.exp(log_std_q)) - norm.logpdf(x, mean_p, np.exp(log_std_p))).sum(axis=1)
            closed = float(gaussian_kl(mean_q, log_std_q, mean_p, log_std_p))
            self.assertAlmostEqual(closed, float(np.mean(log_ratio)), delta=0.02 * closed)


class ConstantEnvironmentTests(SimpleTestCase):
    def test_one_step_prediction_converges(self):
        rng = np.random.default_rng(71)
        state, action, reward = np.array([0.5, -0.3, 0.2]), np.array([0.4, 1.2]), 0.7
        batch = WmBatch(
            obs=np.broadcast_to(state, (4, 4, N_OBS)).copy(),
            actions=np.broadcast_to(action, (4, 3, N_ACTION)).copy(),
            rewards=np.full((4, 3), reward),
            dones=np.zeros((4, 3)),
        )
        model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=rng)
        for lr, steps in ((1e-2, 2000), (1e-3, 1000)):
            opt = Adam(model, lr)
            for _ in range(steps):
                opt.step(model.loss_and_grads(batch, rng=rng)[2])
        prediction = model.predict_next(state, action)
        np.testing.assert_allclose(prediction.next_states[0], state, atol=1e-2)
        self.assertAlmostEqual(float(prediction.rewards[0]), reward, delta=1e-2)

    def test_untrained_prediction_is_finite_and_repeatable(self):
        model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=np.random.default_rng(72))
        first = model.predict_next(np.ones(N_OBS), np.ones(N_ACTION))
        second = model.predict_next(np.ones(N_OBS), np.ones(N_ACTION))
        self.assertTrue(np.all(np.isfinite(first.next_states)))
        np.testing.assert_array_equal(first.next_states, second.next_states)
        np.testing.assert_array_equal(first.rewards, second.rewards)


class ImaginedReturnTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(73)
        self.model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=rng)
        self.actor = GaussianPolicy(N_OBS, N_ACTION, SCALE, hidden=(5,), rng=rng)
        self.critic = ValueCritic(N_OBS, hidden=(5,), rng=rng)
        self.start_h = rng.standard_normal((4, CFG.n_h)) * 0.1
        self.start_z = rng.standard_normal((4, CFG.n_z)) * 0.1

    def replay(self, horizon, seed):
        """Step-by-step rollout with the same random stream as imagine()."""
        rng = np.random.default_rng(seed)
        h, z = self.start_h, self.start_z
        obs = self.model.decode(h, z)[0]
        states, rewards = [], []
        for _ in range(horizon):
            states.append(obs)
            sample = self.actor.sample(obs, rng)
            step = self.model.rssm_step(h, z, sample.action, rng=rng)
            h, z = step.h, step.z
            obs, reward, _ = self.model.decode(h, z)
            rewards.append(reward)
        return states, rewards, obs

    def rollout(self, horizon, gamma, seed):
        return imagine(self.model, self.start_h, self.start_z, self.actor, self.critic, horizon, gamma,
                       np.random.default_rng(seed))

    def test_one_step_horizon(self):
        imagined = self.rollout(1, 0.9, 5)
        _, rewards, last = self.replay(1, 5)
        np.testing.assert_allclose(imagined.returns, rewards[0] + 0.9 * self.critic.value(last), rtol=1e-12, atol=1e-14)

    def test_zero_discount_keeps_the_first_reward(self):
        imagined = self.rollout(3, 0.0, 6)
        _, rewards, _ = self.replay(3, 6)
        np.testing.assert_allclose(imagined.returns, rewards[0], rtol=1e-12)

    def test_returns_match_direct_sum(self):
        gamma, horizon = 0.8, 4
        imagined = self.rollout(horizon, gamma, 7)
        states, rewards, last = self.replay(horizon, 7)
        expected = sum(gamma ** t * rewards[t] for t in range(horizon)) + gamma ** horizon * self.critic.value(last)
        np.testing.assert_allclose(imagined.returns, expected, rtol=1e-12, atol=1e-14)
        for t in range(horizon):
            np.testing.assert_allclose(imagined.advantages[:, t], expected - self.critic.value(states[t]), rtol=1e-12, atol=1e-14)


class ImaginationLossTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(74)
        self.model = WorldModel(N_OBS, N_ACTION, SCALE, CFG, rng=rng)
        self.actor = GaussianPolicy(N_OBS, N_ACTION, SCALE, hidden=(5,), rng=rng)
        self.critic = ValueCritic(N_OBS, hidden=(5,), rng=rng)
        start_h = rng.standard_normal((3, CFG.n_h)) * 0.1
        start_z = rng.standard_normal((3, CFG.n_z)) * 0.1
        self.imagined = imagine(self.model, start_h, start_z, self.actor, self.critic, 2, 0.9, rng)

    def test_no_gradient_reaches_the_critic(self):
        _, grads = imagination_loss(self.imagined, self.actor, 0.3)
        self.assertEqual(set(grads), set(self.actor.params))
        for key, value in self.critic.params.items():
            numeric = numeric_grad(lambda: imagination_loss(self.imagined, self.actor, 0.3)[0], value)
            np.testing.assert_array_equal(numeric, 0.0, err_msg=key)

    def test_returns_equal_to_values_give_zero_loss(self):
        flat = Imagined(
            states=self.imagined.states, u=self.imagined.u, rewards=self.imagined.rewards,
            returns=self.imagined.returns, advantages=np.zeros_like(self.imagined.advantages),
        )
        loss, grads = imagination_loss(flat, self.actor, 0.3)
        self.assertEqual(loss, 0.0)
        self.assertTrue(all(not g.any() for g in grads.values()))
