"""Regression-coupled hidden Markov models."""
