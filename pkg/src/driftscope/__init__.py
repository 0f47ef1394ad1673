"""driftscope: reconstruct the drift field of a planar diffusion from
transition densities observed only outside a bounded region."""

__version__ = "0.1.0"
