"""Dense feature extraction from images into the reprloc dataset format."""

from .backbones import Backbone, BackboneError, resolve_backbone
from .extract import MODES, ExtractError, ExtractSpec, extract

__version__ = "0.1.0"
