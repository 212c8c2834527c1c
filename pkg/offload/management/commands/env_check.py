from offload.config import load_run_config
from offload.env import sanity_checks
from offload.management.base import OffloadCommand, write_json


class Command(OffloadCommand):
    help = 'Run the closed-form and Monte-Carlo sanity suite of the MEC system model'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--samples', type=int, default=100_000, help='Monte-Carlo samples per statistical check')

    def run(self, out, **options):
        if options['samples'] < 1:
            raise ValueError('--samples must be >= 1')
        config = load_run_config(self.config_path(options), seed=options.get('seed'))
        self.config_hash = config.hash
        seed = config.seeds[0]
        results = sanity_checks(config.system, seed=seed, samples=options['samples'])
        write_json(out / 'env_check.json', {'config_hash': config.hash, 'seed': seed, 'checks': results})

        failed = [result['check'] for result in results if not result['passed']]
        for result in results:
            style = self.style.SUCCESS if result['passed'] else self.style.ERROR
            self.stdout.write(style(f"{result['check']:>18}: {'ok' if result['passed'] else 'FAILED'}"))
        if failed:
            raise RuntimeError(f'sanity checks failed: {", ".join(failed)}')
