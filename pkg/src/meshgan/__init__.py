"""Generative modelling of fixed-topology triangle meshes with Chebyshev
graph convolutions and boundary-equilibrium adversarial training."""

from meshgan.mesh import Mesh, MeshGeometry, compute_geometry, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "MeshGeometry",
    "compute_geometry",
    "load_mesh",
    "save_mesh",
]
