"""Observable neural ODEs for causal forecasting under dynamic treatment regimes."""

__version__ = "0.1.0"
