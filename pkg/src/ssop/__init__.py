"""State-space sequence models and operator-learning benchmarks."""
