"""Moving object segmentation on 4D LiDAR clouds with serialized selective state-space blocks."""

__version__ = "0.1.0"
