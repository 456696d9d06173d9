"""Collects the one-line acceptance verdicts for the terminal summary."""
RESULTS: list[str] = []
