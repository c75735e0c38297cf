"""Zero-shot image classification from noisy class documents.

Images are scored against per-class documents by a document transformer and a
patch-to-word cross-attention head, trained on seen classes only.
"""

__version__ = "0.1.0"
