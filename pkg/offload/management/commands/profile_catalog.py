from pathlib import Path

from django.conf import settings

from offload.config import config_hash
from offload.ecld import load_catalog
from offload.management.base import OffloadCommand, write_json
from offload.models import VariantProfile


class Command(OffloadCommand):
    help = 'Validate the variant profile catalog, load it into the database and write catalog.json'

    def add_arguments(self, parser):
        parser.add_argument('--catalog', help='Catalog JSON (defaults to the bundled profile table)')
        parser.add_argument('--out', help='Output directory')

    def run(self, out, **options):
        path = Path(options.get('catalog') or settings.EDGEFLOCK['PROFILE_CATALOG'])
        profiles = load_catalog(path)
        payload = {name: profile.to_dict() for name, profile in profiles.items()}
        self.config_hash = config_hash(payload)
        write_json(out / 'catalog.json', {'config_hash': self.config_hash, 'seed': None, 'profiles': payload})

        for profile in profiles.values():
            VariantProfile.sync(profile, source='TABLE')
            self.stdout.write(
                f'{profile.name:>32}  acc {profile.offline_accuracy:.4f}  hall {profile.offline_hallucination:.3f}  '
                f'{profile.storage_mb:>8.0f} MB  {profile.energy_wh:.4f} Wh'
            )
        self.stdout.write(self.style.SUCCESS(f'Loaded {len(profiles)} profiles from {path}'))
