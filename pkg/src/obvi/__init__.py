"""Object-visual factor-graph SLAM with long-term object maps."""

__version__ = "0.1.0"
