"""Population-adjusted indirect comparisons (MAIC, STC, Bucher) for survival
outcomes, with a Monte Carlo engine for benchmarking them."""

__version__ = "0.1.0"
