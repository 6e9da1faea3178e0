"""Machining-feature retrieval: STL meshes to point clouds, per-point
descriptors, spatial pyramid pooled embeddings and Euclidean top-k search."""

__version__ = "0.1.0"
