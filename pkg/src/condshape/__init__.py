"""Conditional point-cloud generation from depth images and multi-view synthesis.

Submodules: ``geom`` (cameras, clouds, PLY), ``metrics`` (CD, EMD, FPS),
``render`` (z-buffer splatting, view-based sampling, PGM), ``autodiff``
(reverse-mode engine), ``model``, ``losses``, ``train``, ``infer``,
``synthdata`` (procedural corpus), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
