"""
Problem builders and evaluation protocol for the benchmark experiments.
"""
