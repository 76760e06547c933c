"""Tests for replica-lab."""
