"""Sector-partitioned point convolutions (D-Conv) for labeling airborne LiDAR point clouds."""

__version__ = "0.1.0"
