"""Service layer for discovery runs."""
