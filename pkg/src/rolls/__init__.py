"""Radar occupancy estimation trained with LiDAR-derived weak supervision.

Coordinates follow the sensor frame: X forward, Y left, Z up, meters.
"""

__version__ = "0.1.0"
