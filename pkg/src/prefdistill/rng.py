"""Named, step-indexed random substreams derived from one master seed."""

import hashlib

import numpy as np


def substream(seed, name, step=0):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, name, step)``.

    Streams are independent of call history, so a resumed run draws exactly
    what an uninterrupted run would have drawn at the same step.
    """
    digest = hashlib.sha256(f"{int(seed)}:{name}:{int(step)}".encode()).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))
