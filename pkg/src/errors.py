#!/usr/bin/env python3
"""
Exception types shared across the workbench
"""


class WorkbenchError(Exception):
    """Base class for all workbench errors"""


class ConfigError(WorkbenchError, ValueError):
    """Invalid or unknown configuration value"""


class DatasetIntegrityError(WorkbenchError):
    """A dataset file is missing, truncated or does not match its manifest"""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class CheckpointError(WorkbenchError):
    """Checkpoint cannot be loaded (corrupt file or format version mismatch)"""


class MisalignedCohortError(WorkbenchError, ValueError):
    """Predictions and ground truth do not line up patient by patient, slice by slice"""
