"""Learned block-based video codec.

Blocks are predicted from previously decoded frames and neighbouring blocks,
and the prediction error is coded by a multi-stage binary autoencoder.
"""

__version__ = "0.1.0"
