"""Multi-stage pipeline tests."""
