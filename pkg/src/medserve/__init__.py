"""Desk-scale model serving stack.

A small, fully local stand-in for a production inference deployment:
a versioned model registry with injected service-time cost models, a
dynamic-batching inference server speaking HTTP and a length-prefixed
RPC framing, an authenticating gateway that scrubs identifiers out of
clinical text before forwarding, a closed-loop load generator, and a
replica autoscaler simulator.
"""

__version__ = "0.1.0"
