"""Differentiable Gaussian splatting on skeleton-driven deformable meshes.

Primitives live on triangles of a posed mesh, are rectified by a
pose-conditioned network, and are optimized against image sequences.
"""

__version__ = "0.1.0"
