"""Directional connectivity-based segmentation toolkit.

Segmentation masks are lifted to 8-channel connectivity masks, a small
encoder/decoder network with direction-aware attention predicts them,
and bilateral voting + channel aggregation decode them back. Everything
runs on a from-scratch float64 reverse-mode autodiff engine so analytic
gradients can be verified against finite differences end to end.
"""

from .autodiff import GraphError, NonFiniteError, Tensor
from .codec import (
    FormatError,
    bilateral_vote,
    decode_segmentation,
    encode_connectivity,
    rca,
    read_cmk,
    write_cmk,
)
from .network import ForwardOutput, NetConfig, init_params, net_forward

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "FormatError",
    "encode_connectivity",
    "bilateral_vote",
    "rca",
    "decode_segmentation",
    "read_cmk",
    "write_cmk",
    "NetConfig",
    "ForwardOutput",
    "init_params",
    "net_forward",
]
