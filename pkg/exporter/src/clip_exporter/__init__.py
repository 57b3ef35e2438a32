"""Convert public CLIP image-encoder checkpoints into the RINEWTS1
weight-container format, and verify the conversion against a torch
reconstruction of the source tower."""

from .export import CLIP_MEAN, CLIP_STD, convert, export
from .naming import UnknownArchitectureError, detect_scheme, infer_geometry
from .verify import VerificationError, VerifyReport, random_images, verify

__version__ = "0.1.0"
