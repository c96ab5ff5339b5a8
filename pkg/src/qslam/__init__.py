"""Quadric-guided RGB-D mapping toolkit: quadric fitting, depth rectification,
depth-guided ray sampling, a ray transformer with volume rendering, joint
pose/map optimization, TSDF fusion and evaluation metrics."""

__version__ = "0.1.0"
