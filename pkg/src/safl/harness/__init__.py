"""Experiment orchestration: configs, scenarios, datasets, fitting, output files."""
