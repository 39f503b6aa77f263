"""Latent fingerprint pair-relationship recognition.

Preprocessing (coherence quality, FOMFE regularisation, Gabor enhancement,
minutiae), minutia-anchored orientation-field alignment, FIT/OFT pair
tensors, a CNN ensemble pooled by a discriminative RBM, synthetic latent
generation and an identification harness.
"""

from .core import (BinaryMask, GrayImage, Minutia, OrientationField, QualityMap, RigidTransform, apply_rigid,
                   load_image, save_image)
from .errors import (AlignmentFailed, ContractViolation, DegenerateFitError, DegenerateTensorError,
                     FeatureUnavailable, ImageFormatError, InputError, LatentPairError, NoCandidatesError,
                     StageError, TrainingDiverged)

__version__ = "0.1.0"
