"""
Shared plumbing for the NMP management commands.
"""
import logging
from typing import Any, Dict, Optional

from django.core.management.base import BaseCommand, CommandError

from apps.common.exceptions import NmpError
from apps.simulator.config import RunConfig, load_run_config
from apps.simulator.reports import build_report, dumps, write_report

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_FAILURE = 2


class NmpCommand(BaseCommand):
    """Every command takes --seed and --config; engine errors exit with status 2."""

    requires_system_checks = []
    report_name = ""

    # flag dest -> run config key
    config_flags: Dict[str, str] = {}

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=None, help="Seed for the command's random choices.")
        parser.add_argument("--config", default=None, help="Run configuration file (key = value lines).")

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except NmpError as e:
            logger.error(f"{self.report_name or 'command'} failed: {e}")
            raise CommandError(str(e), returncode=EXIT_FAILURE) from e

    def run(self, **options) -> Optional[str]:
        raise NotImplementedError

    def fail(self, message: str):
        raise CommandError(message, returncode=EXIT_FAILURE)

    def load_config(self, options: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> RunConfig:
        overrides = {key: options.get(dest) for dest, key in self.config_flags.items()}
        overrides.update(extra or {})
        return load_run_config(options.get("config"), overrides)

    def emit(self, body: dict, config: Optional[RunConfig] = None, path: Optional[str] = None) -> None:
        report = build_report(self.report_name, body, config.as_dict() if config is not None else None)
        if path:
            write_report(report, path)
            self.stdout.write(path)
        else:
            self.stdout.write(dumps(report), ending="")
