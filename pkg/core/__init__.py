"""Core engine for the replica-lab detection pipeline."""
