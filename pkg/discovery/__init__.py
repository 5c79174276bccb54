"""Command-line application package for generalized category discovery runs."""
