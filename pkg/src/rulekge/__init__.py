"""Knowledge-graph embeddings with a shared-feature neural scorer and logical-rule penalties.

Submodules are imported explicitly (``rulekge.data``, ``rulekge.model``, ...)
so that the CLI can configure BLAS threading before any numpy import.
"""

__version__ = "0.1.0"
