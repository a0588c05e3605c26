"""symvo: deterministic monocular visual odometry with motion-bias controls."""

__version__ = "0.1.0"
