"""Configuration documents, weight archives and raster input."""

from .archive import ArchiveError, ArchiveMismatch, load_archive, load_into, save_archive
from .config import BenchConfig, ConfigDoc, ConfigError, TrainConfig, emit_config, load_config, parse_config
from .raster import RasterError, image_to_input, read_ppm, resize_bilinear, write_ppm

__all__ = [
    "ArchiveError", "ArchiveMismatch", "load_archive", "load_into", "save_archive",
    "BenchConfig", "ConfigDoc", "ConfigError", "TrainConfig", "emit_config", "load_config", "parse_config",
    "RasterError", "image_to_input", "read_ppm", "resize_bilinear", "write_ppm",
]
