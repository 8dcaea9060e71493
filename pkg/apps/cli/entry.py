"""
Command-line entry point: `manage.py <command> [flags]`.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import os
import sys
from typing import List, Optional, TextIO

COMMANDS = {
    "gen-city": "gen_city",
    "simulate": "simulate",
    "evaluate": "evaluate",
    "train-gru": "train_gru",
    "gradcheck": "gradcheck",
    "serve": "serve",
    "inspect-tile": "inspect_tile",
    "bench-memory": "bench_memory",
    "render": "render",
}

PROG = "manage.py"


def usage() -> str:
    return f"usage: {PROG} {{{','.join(COMMANDS)}}} [--seed N] [--config FILE] ...\n"


def main(argv: Optional[List[str]] = None, stdout: Optional[TextIO] = None,
         stderr: Optional[TextIO] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    err = stderr or sys.stderr
    if not argv or argv[0] not in COMMANDS:
        err.write(usage())
        return 1

    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    import django
    from django.core.management import load_command_class
    from django.core.management.base import CommandError

    django.setup()
    name = argv[0]
    command = load_command_class("apps.cli", COMMANDS[name])
    parser = command.create_parser(PROG, name)
    try:
        options = vars(parser.parse_args(argv[1:]))
        args = options.pop("args", ())
        if stdout is not None:
            options["stdout"] = stdout
        if stderr is not None:
            options["stderr"] = stderr
        command.execute(*args, **options)
    except CommandError as e:
        err.write(f"{name}: {e}\n")
        return e.returncode
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    return 0
