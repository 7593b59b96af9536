"""Real-time outage-duration prediction with Gamma output distributions."""

__version__ = "0.1.0"
