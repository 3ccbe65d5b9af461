"""Traffic-congestion frame classification: CNNs, transfer learning, count baselines, and PCA."""

__version__ = "0.1.0"
