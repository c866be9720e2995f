"""Deterministic sub-seed derivation: all randomness flows from one base seed."""

import hashlib


def derive_seed(base_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
