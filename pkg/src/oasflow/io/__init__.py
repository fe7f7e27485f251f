from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .flo import FloFormatError, read_flo, write_flo
from .images import read_image, read_ppm, write_image, write_ppm
from .viz import flow_to_color, make_colorwheel

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "FloFormatError", "read_flo", "write_flo",
    "read_image", "read_ppm", "write_image", "write_ppm",
    "flow_to_color", "make_colorwheel",
]
