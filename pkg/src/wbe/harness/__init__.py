"""Experiment harness: configuration schema, dataset IO and the ``wbe`` CLI."""

from .schema import CONFIG_SCHEMA, ConfigError, load_config, validate_config

__all__ = ["CONFIG_SCHEMA", "ConfigError", "load_config", "validate_config"]
