"""Evaluation metrics and field export."""
from .metrics import (DEFAULT_MESHES, MeshSpec, default_mesh, field_error, relative_l2, ssim, ssim_channel,
                      ssim_reference, traj_error)
from .raster import FieldRaster, export_raster, import_raster
