"""Lung-infection segmentation: edge attention, parallel partial decoder, reverse attention,
pseudo-label semi-supervision, infection-guided multi-class labeling and evaluation metrics."""

from .errors import CheckpointError, ConfigError, ContractError, LoadError, ValidationError

__version__ = "0.1.0"
