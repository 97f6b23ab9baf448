"""Shared fixtures: synthetic corpora and a small trained matcher.

Session fixtures keep the expensive artifacts (matcher training) to one
build per run. Setting ADVMASK_TEST_CACHE to a directory persists those
artifacts across sessions for faster local iteration; the cache key
includes a hash of the package sources, so any code change invalidates
it. Unset (the default), everything trains fresh.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import pytest

from advmask import (
    FaceDataset,
    MatcherConfig,
    build_protocol,
    generate_corpus,
    load_matcher,
    save_matcher,
    train_surrogate,
)

SRC_DIR = Path(__file__).resolve().parents[1] / "src" / "advmask"


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC_DIR.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory) -> Path:
    env = os.environ.get("ADVMASK_TEST_CACHE")
    if env:
        p = Path(env) / source_fingerprint()
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("artifact-cache")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> str:
    """6 identities x 4 images at 64x64; enough for protocol plumbing."""
    root = tmp_path_factory.mktemp("corpus-small")
    generate_corpus(str(root), n_subjects=6, images_per_subject=4, resolution=64, seed=7)
    return str(root)


@pytest.fixture(scope="session")
def small_dataset(small_corpus) -> FaceDataset:
    return FaceDataset(small_corpus, resolution=64)


@pytest.fixture(scope="session")
def small_protocol(small_dataset):
    return build_protocol(small_dataset, n_folds=3, seed=0)


@pytest.fixture(scope="session")
def small_matcher(small_dataset, cache_root):
    """A quick matcher that cleanly separates the 6 toy identities."""
    ckpt = cache_root / "matcher-small.ckpt"
    if ckpt.exists():
        return load_matcher(str(ckpt))
    handle, report = train_surrogate(
        small_dataset,
        MatcherConfig(dim=32, width=0.5, steps=300, batch_size=16, seed=0),
    )
    save_matcher(handle, str(ckpt), report)
    return handle
