"""Experiment recipes: the regression and classification runs and their artifacts."""
