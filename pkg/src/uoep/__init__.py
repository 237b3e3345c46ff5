"""User-oriented exploration: a CVaR-targeted actor population over an implicit-quantile critic,
trained in a simulated session-based recommender."""

__version__ = "0.1.0"
