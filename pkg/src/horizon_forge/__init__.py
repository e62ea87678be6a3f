"""Seismic horizon segmentation with U-Net variants, DBSCAN filtering and orthogonal fusion."""

__version__ = "0.1.0"
