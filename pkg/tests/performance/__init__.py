"""Timing bounds for the numeric core."""
