"""salforge: saliency-map benchmarking for localized-defect classifiers.

A small numpy CNN stack (conv / BatchNorm / ReLU or SiLU / pooling) with
hookable layers, five saliency families including NormGrad, a synthetic
defect-image generator, and the Pointing Game evaluation harness.
"""

__version__ = "0.1.0"

from salforge.errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    MissingResourceError,
    ParseError,
    SalforgeError,
    StateError,
    ValidationError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DimensionError",
    "MissingResourceError",
    "ParseError",
    "SalforgeError",
    "StateError",
    "ValidationError",
]
