"""Simulator for privacy-preserving collaborative fraud detection.

Banks publish locally differentially private embeddings of account
transaction histories; an external scorer consumes them; two distributed
training protocols and three inference-time attacks quantify the
utility-privacy trade-off.
"""

__version__ = "0.1.0"
