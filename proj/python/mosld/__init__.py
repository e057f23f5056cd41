# Copyright (c) 2026, mosld contributors
# SPDX-License-Identifier: Apache-2.0
"""Python access to the mosld core: parameter accounting, gating, configs and the CLI."""

import pkgutil

__path__ = pkgutil.extend_path(__path__, __name__)

from ._core import (  # noqa: E402
    ConfigError,
    DataError,
    MissingArtifactError,
    NumericalError,
    canonical_config,
    count_params,
    gate,
    git_blob_hash,
    load_balance_loss,
    read_checkpoint,
    run_cli,
    task_examples,
    version,
)


def manifest_hash(text, overrides=()):
    """Hash stamped into every output produced from this config."""
    return git_blob_hash(canonical_config(text, list(overrides)))


__all__ = [
    "ConfigError",
    "DataError",
    "MissingArtifactError",
    "NumericalError",
    "canonical_config",
    "count_params",
    "gate",
    "git_blob_hash",
    "load_balance_loss",
    "manifest_hash",
    "read_checkpoint",
    "run_cli",
    "task_examples",
    "version",
]
