"""Unsupervised inference of time-varying interaction graphs from
multi-agent trajectories: a spring-particle simulator, a variational
relation-inference model with several baselines, and experiment
recipes that tie them together."""

__version__ = "0.1.0"
