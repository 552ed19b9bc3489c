"""Content/domain disentanglement GAN for domain-robust hippocampus segmentation."""

from cddgan.domains import DOMAINS, Domain

__version__ = "0.1.0"

__all__ = ["DOMAINS", "Domain", "__version__"]
