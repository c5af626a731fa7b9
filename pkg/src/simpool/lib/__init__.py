"""Simulation building blocks: kernel, pool model, central manager, providers, workload, metrics."""
