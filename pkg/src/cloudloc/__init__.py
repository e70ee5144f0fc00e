"""Camera localization in dense point clouds by direct 2D-3D descriptor matching."""
__version__ = "0.1.0"
