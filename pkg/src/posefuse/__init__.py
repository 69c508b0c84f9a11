"""Few-view object rendering with differentiable reprojection and source-pose refinement."""

__version__ = "0.1.0"
