"""Puts the repository root on sys.path so tests import ``tools`` and ``discovery``."""
