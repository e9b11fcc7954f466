"""Dense deformation network toolkit for 3D deformable image registration."""
from ._kernels import BACKEND as KERNEL_BACKEND
from .volume import DisplacementField, Volume3, load_field, load_volume, save_field, save_volume

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "DisplacementField", "Volume3", "load_field", "load_volume",
           "save_field", "save_volume", "__version__"]
