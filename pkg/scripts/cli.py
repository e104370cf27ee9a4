#!/usr/bin/env python
"""
Installed ``msgp`` entry point.

    msgp generate --config test1
    msgp fit --dataset data/runs/test1/generate/dataset.csv
    msgp darcy --config darcy1 --dataset ... --params ... --reference ...
"""

import os
import sys

COMMANDS = ("generate", "fit", "predict", "variogram", "simulate", "darcy")


def usage() -> str:
    return "usage: msgp {" + "|".join(COMMANDS) + "} [options]\n"


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(usage())
        return 0
    if argv[0] not in COMMANDS:
        sys.stderr.write(f"msgp: unknown command '{argv[0]}'\n" + usage())
        return 1
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    from django.core.management import execute_from_command_line

    execute_from_command_line(["msgp", *argv])
    return 0


if __name__ == "__main__":
    sys.exit(main())
