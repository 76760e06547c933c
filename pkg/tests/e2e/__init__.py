"""End-to-end CLI runs."""
