import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

logger = logging.getLogger(__name__)


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')


def error_message(exc):
    if isinstance(exc, ValidationError):
        return '; '.join(exc.messages)
    return str(exc)


class OffloadCommand(BaseCommand):
    """
    Shared flags (--config, --seed, --out) and failure handling.

    A failed run leaves error.json in the output directory and exits non-zero.
    """
    config_setting = 'RUN_CONFIG'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON config file (defaults to the project setting)')
        parser.add_argument('--seed', type=int, help='Override the configured seed(s) with one seed')
        parser.add_argument('--out', help='Output directory')

    def default_out(self):
        return Path(settings.EDGEFLOCK['OUTPUT_ROOT']) / self.command_name

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def config_path(self, options):
        return Path(options.get('config') or settings.EDGEFLOCK[self.config_setting])

    def handle(self, *args, **options):
        out = Path(options.get('out') or self.default_out())
        out.mkdir(parents=True, exist_ok=True)
        self.config_hash = None
        try:
            self.run(out, **{key: value for key, value in options.items() if key != 'out'})
        except (ValidationError, ValueError, OSError, RuntimeError) as exc:
            message = error_message(exc)
            logger.error('%s failed: %s', self.command_name, message)
            write_json(out / 'error.json', {
                'command': self.command_name,
                'error_type': type(exc).__name__,
                'message': message,
                'config_hash': self.config_hash,
            })
            raise CommandError(f'{self.command_name} failed: {message}') from exc

    def run(self, out, **options):
        raise NotImplementedError
