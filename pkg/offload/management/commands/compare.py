from offload.config import load_run_config
from offload.management.base import OffloadCommand, write_json
from offload.models import PolicyEvaluation
from offload.trainer import COMPARISON_FIELDS, acceptance_checks, compare_policies, write_rows

QOS_FIELDS = ('num_mlus', 'policy', 'seed', 'episode', 'accuracy', 'hallucination')
TASK_SIZE_FIELDS = ('num_mlus', 'policy', 'task_size_mbit', 'reward_mean', 'reward_se', 'latency_mean')


class Command(OffloadCommand):
    help = 'Train both learners, evaluate all four policies on shared seeds and write comparison tables'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--iterations', type=int, help='Override the number of training iterations')
        parser.add_argument('--parallel-envs', type=int, help='Train this many seeds concurrently')

    def run(self, out, **options):
        if options.get('iterations') is not None and options['iterations'] < 1:
            raise ValueError('--iterations must be >= 1')
        config = load_run_config(self.config_path(options), seed=options.get('seed'), iterations=options.get('iterations'))
        self.config_hash = config.hash
        workers = options.get('parallel_envs') or config.parallel_envs
        comparison = compare_policies(config, workers=workers, iterations=config.iterations)

        seeds = ' '.join(str(seed) for seed in config.seeds)
        write_rows(out / 'comparison.csv', comparison.rows, COMPARISON_FIELDS, config.hash, seeds)
        write_rows(out / 'qos_by_episode.csv', comparison.qos_rows, QOS_FIELDS, config.hash, seeds)
        if comparison.task_size_rows:
            write_rows(out / 'reward_by_task_size.csv', comparison.task_size_rows, TASK_SIZE_FIELDS, config.hash, seeds)
        write_json(out / 'evaluation.json', {
            'config_hash': config.hash,
            'seed': list(config.seeds),
            'evaluations': [
                {key: value for key, value in item.items() if key != 'report'}
                | {'report': {k: v for k, v in item['report'].items() if k != 'per_episode'}}
                for item in comparison.evaluations
            ],
        })

        for item in comparison.evaluations:
            PolicyEvaluation.record(item['policy'], item['seed'], item['num_mlus'], config.hash, item['report'])
        for row in comparison.rows:
            self.stdout.write(
                f"K={row['num_mlus']} {row['policy']:>15}: latency {row['latency_mean']:.4f} s, "
                f"accuracy {row['accuracy_mean']:.3f}, hallucination {row['hallucination_mean']:.3f}"
            )

        checks = acceptance_checks(comparison.rows)
        write_json(out / 'acceptance.json', {'config_hash': config.hash, 'seed': list(config.seeds), 'checks': checks})
        for result in checks:
            style = self.style.SUCCESS if result['passed'] else self.style.ERROR
            self.stdout.write(style(
                f"K={result['num_mlus']} {result['check']:>28}: {'ok' if result['passed'] else 'FAILED'}"
            ))
        self.stdout.write(self.style.SUCCESS(f'Wrote comparison tables to {out}'))
