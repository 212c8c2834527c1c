from dataclasses import replace

from offload.compression import run_pipeline
from offload.config import load_compress_config
from offload.management.base import OffloadCommand, write_json
from offload.models import CompressionReport, VariantProfile


class Command(OffloadCommand):
    help = 'Prune, distill and quantize the toy network and write a compression report and profile'
    config_setting = 'COMPRESS_CONFIG'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--bit-width', type=int, help='Override the hardware-derived quantization bit width')

    def run(self, out, **options):
        config = load_compress_config(self.config_path(options), seed=options.get('seed'))
        if options.get('bit_width') is not None:
            if options['bit_width'] < 1:
                raise ValueError('--bit-width must be >= 1')
            config = replace(config, bit_width=options['bit_width'], raw={**config.raw, 'bit_width': options['bit_width']})
        self.config_hash = config.hash
        result = run_pipeline(config)
        stamp = {'config_hash': config.hash, 'seed': config.seed}

        write_json(out / 'compression_report.json', {**stamp, **result.report})
        write_json(out / 'profile.json', {**stamp, 'name': result.profile.name, **result.profile.to_dict()})
        write_json(out / 'deployment.json', {**stamp, **result.deployment})

        profile = VariantProfile.sync(result.profile, source='COMPRESSION')
        CompressionReport.objects.create(
            profile=profile,
            config_hash=config.hash,
            seed=config.seed,
            target=config.target,
            bit_width=result.report['bit_width'],
            theta=result.report['theta'],
            storage_ratio=result.report['storage_ratio'],
            output_dir=str(out),
            report=result.report,
        )
        masks = result.report['masks']
        self.stdout.write(self.style.SUCCESS(
            f"Compressed toy network: kept {masks['combined_popcount']}/{masks['total_params']} weights at "
            f"q={result.report['bit_width']}, storage ratio {result.report['storage_ratio']:.3f}; wrote {out}"
        ))
