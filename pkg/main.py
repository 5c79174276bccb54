#!/usr/bin/env python3
"""Entry point: python3 main.py <command> [options]; see ``--help``."""

import sys

from discovery.cli import main

if __name__ == "__main__":
    sys.exit(main())
