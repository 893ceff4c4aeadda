"""Multispectral LiDAR land-cover segmentation for riverine scenes."""

__version__ = "0.1.0"

from .core import LandCoverClass, PointCloud, read_cloud, write_cloud  # noqa: E402

__all__ = ["LandCoverClass", "PointCloud", "read_cloud", "write_cloud", "__version__"]
