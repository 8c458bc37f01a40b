"""anchoralign: cross-domain sketch-to-image embedding alignment.

Trains a small encoder that maps precomputed sketch and image features into
a shared retrieval space, guided by per-class anchor vectors (word-space and
visual class centers), and evaluates zero-shot retrieval quality.
"""

from ._kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
