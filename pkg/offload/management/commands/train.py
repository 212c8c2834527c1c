import logging
from pathlib import Path

from django.db import transaction

from offload.config import load_run_config
from offload.management.base import OffloadCommand, write_json
from offload.models import IterationMetric, PolicyEvaluation, TrainingRun
from offload.trainer import BASELINES, POLICIES, run_baseline, train_seeds

logger = logging.getLogger(__name__)


class Command(OffloadCommand):
    help = 'Train the offloading policy (world-model PPO or vanilla PPO) on every configured seed'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--baseline', choices=POLICIES, help='Policy to run instead of the configured algorithm')
        parser.add_argument('--iterations', type=int, help='Override the number of training iterations')
        parser.add_argument('--parallel-envs', type=int, help='Train this many seeds concurrently')
        parser.add_argument('--resume', action='store_true', help='Continue from checkpoint.json when present')

    def run(self, out, **options):
        if options.get('iterations') is not None and options['iterations'] < 1:
            raise ValueError('--iterations must be >= 1')
        config = load_run_config(
            self.config_path(options), seed=options.get('seed'),
            iterations=options.get('iterations'), algorithm=options.get('baseline'),
        )
        self.config_hash = config.hash

        if config.algorithm in BASELINES:
            self.run_static(out, config)
            return

        workers = options.get('parallel_envs') or config.parallel_envs
        runs = {seed: self.start_run(out, config, seed) for seed in config.seeds}
        try:
            results, _ = train_seeds(
                config, out_dir=out, algorithm=config.algorithm, iterations=config.iterations,
                resume=options.get('resume', False), workers=workers,
            )
        except (ValueError, OSError, RuntimeError) as exc:
            TrainingRun.objects.filter(pk__in=[run.pk for run in runs.values()]).update(status='FAILED', error=str(exc))
            raise

        for result in results:
            self.finish_run(runs[result.seed], result)
            self.stdout.write(self.style.SUCCESS(
                f'{result.algorithm} seed {result.seed}: {len(result.metrics)} iterations, '
                f'final reward {result.metrics[-1]["reward_mean"]:.4f}; wrote {result.out_dir}'
            ))

    def start_run(self, out, config, seed):
        run, _ = TrainingRun.objects.update_or_create(
            output_dir=str(Path(out) / f'seed_{seed}'),
            seed=seed,
            algorithm=config.algorithm,
            defaults={
                'num_mlus': config.system.num_mlus,
                'config': config.raw,
                'config_hash': config.hash,
                'status': 'RUNNING',
                'error': '',
            },
        )
        return run

    @transaction.atomic
    def finish_run(self, run, result):
        run.metrics.all().delete()
        IterationMetric.objects.bulk_create([IterationMetric.from_row(run, row) for row in result.metrics])
        run.iterations_completed = len(result.metrics)
        run.convergence_iteration = result.convergence_iteration
        run.status = 'COMPLETED'
        run.save()

    def run_static(self, out, config):
        reports = {}
        for seed in config.seeds:
            seed_dir = Path(out) / f'seed_{seed}'
            seed_dir.mkdir(parents=True, exist_ok=True)
            report = run_baseline(
                config.algorithm, config.system, seed, config.eval_episodes,
                trace_dir=seed_dir, trace_episodes=config.trace_episodes, config_hash=config.hash,
            )
            PolicyEvaluation.record(config.algorithm, seed, config.system.num_mlus, config.hash, report)
            reports[str(seed)] = report
        write_json(out / 'evaluation.json', {
            'config_hash': config.hash,
            'seed': list(config.seeds),
            'policy': config.algorithm,
            'num_mlus': config.system.num_mlus,
            'reports': reports,
        })
        logger.info('%s has nothing to learn; evaluated on %d seeds', config.algorithm, len(config.seeds))
        self.stdout.write(self.style.SUCCESS(f'Evaluated {config.algorithm}; wrote {out / "evaluation.json"}'))
