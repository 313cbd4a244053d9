"""OCT-A microvasculature segmentation and inter-capillary area quantification."""

__version__ = "0.1.0"
