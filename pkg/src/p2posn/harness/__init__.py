"""Experiment harness: workload plans, churn, runs, metric export and checks."""
