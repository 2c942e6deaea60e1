"""Multi-modal flow matching on toy molecular surfaces.

Submodules: ``geom3d`` (rotations, frames, Kabsch), ``flows_cont``,
``flows_so3`` and ``flows_discrete`` (probability paths and samplers),
``surface`` (point clouds and features), ``esgn`` (equivariant surface
network), ``nn`` / ``train`` (networks, losses, optimizer), ``metrics`` and
``cli``.
"""

__version__ = "0.1.0"
