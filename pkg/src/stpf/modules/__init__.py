"""stpf modules -- layers, data pipeline, training, forecasting and synthetic data."""
