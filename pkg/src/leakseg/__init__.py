"""Semi-supervised vessel segmentation with a generator-leaking GAN.

A K+1-class GAN whose discriminator is a U-Net segmentation network,
optionally "polluted" by activations leaked from the generator's
upsampling ladder, and regularized by a mean-teacher consistency loss.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
