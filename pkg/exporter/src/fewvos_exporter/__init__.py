"""Bridge from a segmentation backbone to the fewvos interchange formats."""

from .backbones import FeatureExtractor, TinyBackbone
from .export import ExportError, ExportJob, export
from .formats import write_manifest, write_tensor

__version__ = "0.1.0"
