"""Two-stage dynamics-informed trajectory prediction.

A short-horizon generator constrained by a discrete bicycle model feeds an
interaction encoder, and a maneuver-conditioned decoder produces multimodal
long-horizon futures.  Everything runs on numpy through ``demotraj.numkernel``.
"""

__version__ = "0.1.0"
