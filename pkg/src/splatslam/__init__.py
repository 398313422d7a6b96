"""Gaussian-splatting RGB-D SLAM with learned binary masks, at desk scale."""

from .lie import Pose, exp, log
from .scene import CameraIntrinsics, Frame, Gaussian, GaussianMap
from .rasterizer import render, render_backward, render_reference

__all__ = ["Pose", "exp", "log", "CameraIntrinsics", "Frame", "Gaussian", "GaussianMap", "render",
           "render_backward", "render_reference"]
__version__ = "0.1.0"
