"""LiDAR scan matching on cylinder images: dense coarse-to-fine correspondences,
robust rigid estimation, odometry and trajectory evaluation."""

__version__ = "0.1.0"
