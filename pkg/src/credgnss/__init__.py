"""Differentiable GNSS factor-graph positioning trained for covariance credibility."""

__version__ = "0.1.0"
