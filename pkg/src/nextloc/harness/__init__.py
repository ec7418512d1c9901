"""Synthetic cities, experiment configuration, runs, reports and the CLI."""
