"""Bridge from labeled image folders to DIFZ feature files."""

from .backbones import BackboneError, get_backbone
from .export import ExportError, ExportJob, ExportResult, export_features

__version__ = "0.1.0"
