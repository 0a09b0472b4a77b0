# Copyright 2026 The dlostate authors
"""Occlusion-robust state estimation for deformable linear objects."""
__author__ = "The dlostate authors"
__version__ = "0.1.0"
__email__ = "dlostate@users.noreply.github.com"
__description__ = "Rope state estimation from occluded point clouds"
__uri__ = "https://github.com/dlostate/dlostate"
