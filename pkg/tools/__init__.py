"""Numeric pipeline modules for generalized category discovery."""
