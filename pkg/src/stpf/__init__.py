"""stpf -- spatio-temporal property forecasting on masked reservoir grids."""

__version__ = "0.1.0"
