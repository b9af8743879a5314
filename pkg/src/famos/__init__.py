"""famos: adversarial mosaics from a parametric generator and a tiled template memory."""

__version__ = "0.1.0"
