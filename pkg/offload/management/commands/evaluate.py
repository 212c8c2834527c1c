from pathlib import Path

from offload.config import load_run_config
from offload.management.base import OffloadCommand, write_json
from offload.models import PolicyEvaluation, TrainingRun
from offload.trainer import BASELINES, POLICIES, Trainer, run_baseline


class Command(OffloadCommand):
    """
    Evaluate a trained policy (read from <out>/seed_<n>/checkpoint.json) or a static baseline
    with deterministic mean actions on the evaluation stream.

    Pass the same --config, --seed and --iterations used for training; the checkpoint's
    config hash must match.
    """
    help = 'Evaluate trained checkpoints or a static baseline and write evaluation.json'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--baseline', choices=POLICIES, help='Policy to evaluate instead of the configured algorithm')
        parser.add_argument('--iterations', type=int, help='Iteration override used at training time')
        parser.add_argument('--episodes', type=int, help='Override the number of evaluation episodes')

    def run(self, out, **options):
        config = load_run_config(
            self.config_path(options), seed=options.get('seed'),
            iterations=options.get('iterations'), algorithm=options.get('baseline'),
        )
        self.config_hash = config.hash
        episodes = options.get('episodes') or config.eval_episodes
        if episodes < 1:
            raise ValueError('--episodes must be >= 1')

        reports = {}
        for seed in config.seeds:
            seed_dir = Path(out) / f'seed_{seed}'
            seed_dir.mkdir(parents=True, exist_ok=True)
            run = None
            if config.algorithm in BASELINES:
                report = run_baseline(
                    config.algorithm, config.system, seed, episodes,
                    trace_dir=seed_dir, trace_episodes=config.trace_episodes, config_hash=config.hash,
                )
            else:
                report = self.evaluate_checkpoint(config, seed, seed_dir, episodes)
                run = TrainingRun.objects.filter(output_dir=str(seed_dir), seed=seed).first()
            PolicyEvaluation.record(config.algorithm, seed, config.system.num_mlus, config.hash, report, run=run)
            reports[str(seed)] = report
            self.stdout.write(self.style.SUCCESS(
                f'{config.algorithm} seed {seed}: latency {report["latency_mean"]:.4f} s, '
                f'accuracy {report["accuracy_mean"]:.3f}, hallucination {report["hallucination_mean"]:.3f}'
            ))

        write_json(out / 'evaluation.json', {
            'config_hash': config.hash,
            'seed': list(config.seeds),
            'policy': config.algorithm,
            'num_mlus': config.system.num_mlus,
            'reports': reports,
        })

    def evaluate_checkpoint(self, config, seed, seed_dir, episodes):
        checkpoint = seed_dir / 'checkpoint.json'
        if not checkpoint.exists():
            raise OSError(f'no checkpoint at {checkpoint}; run train first')
        trainer = Trainer(config, seed, algorithm=config.algorithm)
        extra = trainer.load(checkpoint)
        if extra.get('config_hash') != config.hash:
            raise ValueError(
                f'{checkpoint} was trained with config {extra.get("config_hash")}, not {config.hash}'
            )
        return trainer.evaluate(episodes=episodes, trace_dir=seed_dir)
