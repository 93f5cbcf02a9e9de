"""Flow-phase decomposition and color-coded visualization of DSA image series."""

__version__ = "0.1.0"

from .ica import IcaConfig, SourceSet, UnmixingModel, amari_index, fastica
from .imageio import ImageSeries, Polarity, RoiRect, load_series
from .phantom import PhantomSpec, generate_phantom
from .phases import Phase
from .pipeline import decompose

__all__ = [
    "IcaConfig",
    "ImageSeries",
    "Phase",
    "PhantomSpec",
    "Polarity",
    "RoiRect",
    "SourceSet",
    "UnmixingModel",
    "amari_index",
    "decompose",
    "fastica",
    "generate_phantom",
    "load_series",
]
