"""Shared helpers: seeded RNG derivation, vector utilities, float formatting."""

import hashlib

import numpy as np

# All text formats emit 8 significant digits.
FLOAT_FMT = "%.8g"


def derive_rng(seed, *keys):
    """Deterministic per-purpose generator derived from a global seed.

    String keys are hashed with sha256 so the derivation is stable across
    runs and platforms (unlike the builtin ``hash``). Callers that fan work
    out to parallel workers must derive one generator per work unit.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        digest = hashlib.sha256(str(key).encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def unit(v):
    """Normalize a vector, raising on (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-300:
        raise ValueError("cannot normalize zero vector")
    return v / n


def normalize_rows(a, eps=1e-300):
    """Row-wise normalization; rows with norm < eps raise."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms < eps):
        raise ValueError("cannot normalize zero-norm row")
    return a / norms[:, None]


def fmt_floats(row):
    """Format a sequence of floats to 8 significant digits."""
    return " ".join(FLOAT_FMT % x for x in row)
