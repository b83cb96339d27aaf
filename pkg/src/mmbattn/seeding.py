"""Deterministic sub-seed derivation.

All randomness in a run flows from one integer seed.  Independent
consumers (parameter init, shuffling, synthetic data) derive their own
streams by hashing (seed, purpose), so toggling one component never
shifts the random numbers seen by another.
"""

import hashlib


def derive_seed(seed: int, purpose: str) -> int:
    """Derive a stable 64-bit sub-seed from a base seed and a purpose string."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
