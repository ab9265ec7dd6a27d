"""Figure rendering for branchfield run artifacts."""

from .artifacts import HashMismatchError, SchemaMismatchError
from .render import KINDS, PlotJob, render

__all__ = ["HashMismatchError", "KINDS", "PlotJob", "SchemaMismatchError",
           "render"]
__version__ = "0.1.0"
