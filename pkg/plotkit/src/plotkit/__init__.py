"""Figure generation from experiment artifact files.

The training side of the project writes history CSVs, sweep manifests,
trade-off tables and scaling reports; this package turns those files into
figures. It talks to the rest of the project only through the file formats:
nothing here imports the training code.

Every figure comes with a sidecar JSON holding each number that reached the
axes, so a figure can be audited without re-running anything.
"""

from .schema import EmptySelection, SchemaMismatch
from .figures import FigureSpec, render

__version__ = "0.1.0"

__all__ = ["FigureSpec", "render", "SchemaMismatch", "EmptySelection",
           "__version__"]
