from django.core.management.base import CommandError
from django.test import SimpleTestCase

from apps.cli.base import NmpCommand
from .exceptions import (
    CheckpointFormatError,
    ConfigurationError,
    FleetRunError,
    NmpError,
    ServiceUnavailable,
    ShapeError,
    TileFormatError,
    TrainingDiverged,
)


class ExceptionTests(SimpleTestCase):
    def test_value_errors_stay_catchable_as_value_error(self):
        for cls in (ShapeError, ConfigurationError):
            with self.assertRaises(ValueError):
                raise cls("bad")

    def test_offsets_in_message(self):
        for cls in (TileFormatError, CheckpointFormatError):
            error = cls("truncated", 17)
            self.assertEqual(error.offset, 17)
            self.assertIn("offset 17", str(error))

    def test_service_unavailable_is_retryable(self):
        self.assertTrue(ServiceUnavailable("down").retryable)

    def test_partial_payloads(self):
        self.assertEqual(TrainingDiverged("nan", (1, 2)).history, [1, 2])
        self.assertEqual(TrainingDiverged("nan").history, [])
        self.assertEqual(FleetRunError("stop", {"trips": []}).partial_report, {"trips": []})


class FailingCommand(NmpCommand):
    def run(self, **options):
        raise ConfigurationError("no such preset")


class CommandMappingTests(SimpleTestCase):
    def test_engine_error_becomes_exit_code_two(self):
        with self.assertRaises(CommandError) as ctx:
            FailingCommand().handle(seed=None, config=None)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIsInstance(ctx.exception.__cause__, NmpError)
