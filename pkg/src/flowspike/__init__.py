"""Spiking Timelens-style optical flow from event-camera streams."""
from flowspike.tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
