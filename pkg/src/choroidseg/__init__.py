"""Domain-adaptive segmentation of a band-shaped region in grayscale images.

Supervised training on a labeled source domain plus output-space adversarial
alignment and pretrained-feature perceptual matching for an unlabeled target
domain, with a synthetic two-domain benchmark and boundary-aware metrics.
"""

__version__ = "0.1.0"
