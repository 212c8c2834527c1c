import csv

from django.contrib.auth.models import User
from django.test import TestCase
from django.urls import reverse

from offload import ecld
from offload.models import CompressionReport, IterationMetric, PolicyEvaluation, TrainingRun, VariantProfile


def make_run(**overrides):
    fields = {
        'algorithm': 'wm-ppo', 'seed': 0, 'num_mlus': 2, 'config_hash': 'abc', 'output_dir': '/tmp/run',
        'status': 'COMPLETED',
    }
    fields.update(overrides)
    return TrainingRun.objects.create(**fields)


def metric_row(iteration, **extra):
    row = {
        'iteration': iteration, 'reward_mean': 0.5, 'latency_mean': 0.4, 'accuracy_mean': 0.7,
        'hallucination_mean': 0.6, 'energy_mean': 0.3, 'omega_mean': 0.0, 'actor_loss': 0.1,
        'critic_loss': 0.2, 'clip_fraction': 0.0, 'approx_kl': 0.001,
    }
    row.update(extra)
    return row


class ModelTests(TestCase):
    def test_sync_updates_in_place(self):
        profile = ecld.VariantProfile('toy/ecld', 0.7, 0.3, 1.5, 0.01, family='toy', method='ecld')
        VariantProfile.sync(profile, source='COMPRESSION')
        VariantProfile.sync(ecld.VariantProfile('toy/ecld', 0.8, 0.3, 1.5, 0.01), source='COMPRESSION')
        row = VariantProfile.objects.get()
        self.assertEqual(row.offline_accuracy, 0.8)
        self.assertEqual(row.source, 'COMPRESSION')

    def test_metric_row_keeps_unknown_keys_as_extra(self):
        run = make_run()
        metric = IterationMetric.from_row(run, metric_row(1, wm_loss=2.5, uncertainty_mean=0.4, seed=0))
        metric.save()
        self.assertEqual(metric.wm_loss, 2.5)
        self.assertEqual(metric.extra, {'uncertainty_mean': 0.4, 'seed': 0})

    def test_final_metric_is_the_last_iteration(self):
        run = make_run()
        for i in (2, 1, 3):
            IterationMetric.from_row(run, metric_row(i, reward_mean=float(i))).save()
        self.assertEqual(run.final_metric.reward_mean, 3.0)

    def test_record_evaluation(self):
        report = {
            'episodes': 4, 'latency_mean': 0.3, 'reward_mean': 1.2, 'accuracy_mean': 0.9,
            'hallucination_mean': 0.7, 'energy_mean': 0.2, 'accuracy_satisfaction': 1.0,
            'hallucination_satisfaction': 0.5,
        }
        evaluation = PolicyEvaluation.record('always-offload', 1, 3, 'abc', report)
        self.assertEqual(str(evaluation), 'always-offload K=3 seed 1')
        self.assertIsNone(evaluation.run)


class DashboardViewTests(TestCase):
    def setUp(self):
        self.user = User.objects.create_user('operator', password='pw')
        self.client.force_login(self.user)
        self.run = make_run()
        for i in (1, 2):
            IterationMetric.from_row(self.run, metric_row(i)).save()
        self.profile = VariantProfile.objects.create(
            name='llama/ecld', family='llama', method='ecld', offline_accuracy=0.6,
            offline_hallucination=0.65, storage_mb=3000.0, energy_wh=0.1,
        )

    def test_login_is_required(self):
        self.client.logout()
        response = self.client.get(reverse('run-list'))
        self.assertEqual(response.status_code, 302)
        self.assertIn(reverse('login'), response['Location'])

    def test_home(self):
        response = self.client.get(reverse('home'))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.context['run_count'], 1)
        self.assertEqual(response.context['profile_count'], 1)

    def test_run_list_filters(self):
        make_run(algorithm='ppo', output_dir='/tmp/other')
        response = self.client.get(reverse('run-list'), {'algorithm': 'ppo'})
        self.assertEqual([run.algorithm for run in response.context['runs']], ['ppo'])

    def test_run_detail(self):
        response = self.client.get(reverse('run-detail', args=[self.run.pk]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual([m.iteration for m in response.context['metrics']], [1, 2])

    def test_metrics_csv(self):
        response = self.client.get(reverse('run-metrics-csv', args=[self.run.pk]))
        self.assertEqual(response['Content-Type'], 'text/csv')
        rows = list(csv.reader(response.content.decode().splitlines()))
        self.assertEqual(rows[0], IterationMetric.CSV_FIELDS)
        self.assertEqual(len(rows), 3)

    def test_missing_run(self):
        self.assertEqual(self.client.get(reverse('run-metrics-csv', args=[999])).status_code, 404)

    def test_profile_list_by_family(self):
        VariantProfile.objects.create(
            name='qwen/original', family='qwen', method='original', offline_accuracy=0.5,
            offline_hallucination=0.7, storage_mb=1000.0, energy_wh=0.2,
        )
        response = self.client.get(reverse('profile-list'), {'family': 'llama'})
        self.assertEqual([p.name for p in response.context['profiles']], ['llama/ecld'])

    def test_report_pages(self):
        report = CompressionReport.objects.create(
            profile=self.profile, config_hash='abc', target='smartphone', bit_width=4, theta=0.1,
            storage_ratio=0.05, output_dir='/tmp/compress',
            report={'stages': [{'stage': 'original', 'storage_mb': 1.0, 'energy_wh': 0.1}]},
        )
        self.assertEqual(self.client.get(reverse('report-list')).status_code, 200)
        response = self.client.get(reverse('report-detail', args=[report.pk]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(len(response.context['report'].stages), 1)

    def test_evaluation_list_by_k(self):
        report = {
            'episodes': 1, 'latency_mean': 0.3, 'reward_mean': 1.2, 'accuracy_mean': 0.9,
            'hallucination_mean': 0.7, 'energy_mean': 0.2, 'accuracy_satisfaction': 1.0,
            'hallucination_satisfaction': 1.0,
        }
        PolicyEvaluation.record('ppo', 0, 2, 'abc', report)
        PolicyEvaluation.record('ppo', 0, 3, 'abc', report)
        response = self.client.get(reverse('evaluation-list'), {'num_mlus': '3'})
        self.assertEqual([e.num_mlus for e in response.context['evaluations']], [3])
