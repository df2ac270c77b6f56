"""Volumetric initialization and depth distillation for Gaussian splatting."""

from splatinit.geometry import Box, Camera, Ray, camera_bbox, pixel_ray

__version__ = "0.1.0"

__all__ = ["Box", "Camera", "Ray", "camera_bbox", "pixel_ray"]
