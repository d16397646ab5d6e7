"""Image-augmented hedonic property valuation.

Extracts per-image feature vectors with a Vision Transformer encoder
(optionally pretrained at small scale with label-free self-distillation),
pools them per property, fuses them with tabular listing features, and fits
a ridge regression whose regularization strength is chosen on validation
RMSE.
"""

__version__ = "0.1.0"
