"""Multi-attribute enhanced person search at desk scale."""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

__version__ = "0.1.0"


@lru_cache(maxsize=1)
def code_version() -> str:
    """Version tag plus a short digest of the package sources."""
    h = hashlib.sha256()
    root = resources.files(__name__)
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith((".py", ".json")):
            h.update(entry.name.encode())
            h.update(entry.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"
