"""Multi-resolution tumor segmentation on pyramidal slides."""
from .kernels import BACKEND
from .pyramid import (
    BACKGROUND,
    CLASS_NAMES,
    NUM_CLASSES,
    OTHERS,
    TUMOR,
    LabelMask,
    PyramidalSlide,
    SynthSpec,
    build_pyramid,
    load_slide,
    otsu_tissue_mask,
    save_slide,
    synth_slide,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BACKGROUND",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "OTHERS",
    "TUMOR",
    "LabelMask",
    "PyramidalSlide",
    "SynthSpec",
    "build_pyramid",
    "load_slide",
    "otsu_tissue_mask",
    "save_slide",
    "synth_slide",
]
