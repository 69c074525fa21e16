"""Low-light visual odometry toolkit.

Pluggable image enhancement, multi-scale binary features with robust
two-view verification, a minimal monocular tracker, and trajectory
metrics (ATE / AOE / correct rate) for benchmarking how far into the
dark a feature-based pipeline keeps working.
"""

__version__ = "0.1.0"
