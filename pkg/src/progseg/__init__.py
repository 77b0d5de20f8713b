"""Progressive left-atrial scar segmentation toolkit.

Volumetric primitives (NIfTI-1 subset I/O, resampling, patching), an exact
anisotropic Euclidean distance transform, wall-band anatomical priors with a
spatially weighted scar loss, a stochastic 3D augmentation pipeline,
surface-distance metrics, procedural LGE-like phantoms, and a three-stage
trainer around a micro dual-decoder network.
"""

from progseg.volume import Volume, PatchSpec

__all__ = ["Volume", "PatchSpec"]
__version__ = "0.1.0"
