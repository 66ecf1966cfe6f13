"""Seed splitting and worker-count helpers shared across the package."""

from __future__ import annotations

import hashlib
import os

import numpy as np


def _label_entropy(label) -> int:
    """Stable 64-bit entropy for a stream label (SHA-256, not hash())."""
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_rng(seed: int, *path) -> np.random.Generator:
    """Derive an independent generator for a named stream.

    Splitting rule: the root seed plus the SHA-256-derived entropy of each
    path label feed one SeedSequence, so (seed, path) always maps to the
    same stream regardless of creation order. Used for e.g.
    split_rng(seed, "init"), split_rng(seed, "sampler", scale).
    """
    entropy = [int(seed)] + [_label_entropy(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def worker_count(n_tasks: int | None = None) -> int:
    """Worker parallelism cap: FCNA_THREADS env var, else the CPU count."""
    raw = os.environ.get("FCNA_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        cap = os.cpu_count() or 1
    cap = max(1, cap)
    if n_tasks is not None:
        cap = min(cap, max(1, n_tasks))
    return cap
