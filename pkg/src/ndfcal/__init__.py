"""Viewpoint-dependent distortion maps for wide field-of-view near-eye displays.

The package learns a neural distortion field (an MLP queried along eye
rays and composited volumetrically), builds its training data from
simulated gray-code captures, and compares it with point-source
reconstruction, trilinear interpolation and a pose-conditioned Gaussian
kernel model.
"""

from .geometry import CameraIntrinsics, EyePose, GridSpec
from .maps import DistortionMap
from .ndf import NdfModel, NeuralDistortionField, TrainConfig
from .optics import OpticsModel

__all__ = ["CameraIntrinsics", "DistortionMap", "EyePose", "GridSpec", "NdfModel",
           "NeuralDistortionField", "OpticsModel", "TrainConfig"]
__version__ = "0.1.0"
