"""Counter-based deterministic random substreams.

Every random draw in the simulator comes from a Philox generator keyed by a
hash of (seed, *labels). Streams are therefore independent of creation order,
worker count and of which other streams exist: excluding an NDT from a run
never shifts the randomness seen by the others.
"""

import hashlib
from typing import Any, Dict

import numpy as np


def derive_key(seed: int, *labels: Any) -> int:
    """Map a seed and a label path to a 128-bit Philox key."""
    text = ":".join([str(int(seed))] + [_label(label) for label in labels])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:16], "little", signed=False)


def substream(seed: int, *labels: Any) -> np.random.Generator:
    """Return a fresh generator for the named substream.

    Calling this twice with the same arguments yields generators that produce
    identical sequences.
    """
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))


def describe_schedule(seed: int) -> Dict[str, Any]:
    """Describe the substream layout so a history can be replayed elsewhere."""
    return {
        "seed": int(seed),
        "bit_generator": "Philox",
        "key": "sha256(seed:labels)[:16] little-endian",
        "batch_labels": ["batch", "<ndt>", "<round>"],
        "init_labels": ["init"],
        "perturb_labels": ["perturb", "<sorted target ids>"],
    }


def _label(label: Any) -> str:
    if isinstance(label, (tuple, list, frozenset, set)):
        items = sorted(label) if isinstance(label, (frozenset, set)) else list(label)
        return "(" + ",".join(str(item) for item in items) + ")"
    return str(label)
