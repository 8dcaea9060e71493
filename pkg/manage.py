#!/usr/bin/env python
"""Command-line utility: NMP sub-commands plus Django's administrative tasks."""
import sys
import os

def main():
    """Run an NMP sub-command or an administrative task."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    from apps.cli.entry import COMMANDS, main as nmp_main

    if len(sys.argv) > 1 and sys.argv[1] in COMMANDS:
        sys.exit(nmp_main(sys.argv[1:]))
    execute_from_command_line(sys.argv)


if __name__ == "__main__":
    main()
