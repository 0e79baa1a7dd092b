"""Named, independent random substreams derived from one seed."""
from __future__ import annotations

import hashlib
import random


def substream(seed: int, name: str) -> random.Random:
    """Return a generator for ``name`` that no other name can perturb.

    Adding a node or link only adds streams; existing draws are unchanged.
    """
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return random.Random(int.from_bytes(digest[:16], "big"))
