"""Dataset ingestion, pixel normalization, and comparison protocols.

Images live in a directory tree ``root/<subject_id>/<image>.png|jpg``,
pre-aligned. Subjects with fewer than two images are filtered out; the
first image (sorted by filename) of each surviving subject is its
gallery image, the rest are probes.

The model domain is float32 in [-1, 1]: pixel -> (pixel - 127.5) / 128.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import MalformedInputError, ProtocolInfeasibleError, ShapeMismatchError

VALID_EXTENSIONS = {".png", ".jpg", ".jpeg"}

GALLERY = "gallery"
PROBE = "probe"


# ---------------------------------------------------------------------------
# Pixel-domain conversion
# ---------------------------------------------------------------------------

def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to the model domain: (p - 127.5) / 128.

    Args:
        pixels: HxWx3 array with values in [0, 255].

    Returns:
        float32 HxWx3 array in [-0.99609375, 0.99609375].
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise MalformedInputError(
            f"expected HxWx3 image, got shape {arr.shape}"
        )
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise MalformedInputError("pixel values outside [0, 255]")
    return ((arr.astype(np.float32) - 127.5) / 128.0).astype(np.float32)


def denormalize(values: np.ndarray) -> np.ndarray:
    """Invert normalize(): round(v * 128 + 127.5), clamped to [0, 255].

    Rounding is round-half-to-even (numpy rint). Round-trips exactly over
    all 256 integer pixel values.
    """
    arr = np.asarray(values, dtype=np.float64)
    pixels = np.rint(arr * 128.0 + 127.5)
    return np.clip(pixels, 0, 255).astype(np.uint8)


def load_image(path: str, resolution: int) -> np.ndarray:
    """Load an image file as uint8 HxWx3, center-cropped square and resized."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        if w != h:
            side = min(w, h)
            left = (w - side) // 2
            top = (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    """One dataset image: identity label, role, and path relative to root."""
    subject_id: str
    relpath: str
    role: str  # GALLERY or PROBE


class FaceDataset:
    """Filtered, ordered view of a ``root/<subject>/<image>`` tree.

    Record order is deterministic (sorted subjects, sorted filenames), so
    indices are stable across runs. Pixel data is loaded once and cached;
    instances are read-only after construction.
    """

    def __init__(self, root: str, resolution: int = 160):
        self.root = root
        self.resolution = resolution
        self.records: list[ImageRecord] = []
        self._scan()
        self._cache: dict[int, np.ndarray] = {}

    def _scan(self) -> None:
        if not os.path.isdir(self.root):
            raise FileNotFoundError(f"dataset root not found: {self.root}")
        for subject in sorted(os.listdir(self.root)):
            subject_dir = os.path.join(self.root, subject)
            if not os.path.isdir(subject_dir):
                continue
            names = sorted(
                f for f in os.listdir(subject_dir)
                if os.path.splitext(f)[1].lower() in VALID_EXTENSIONS
            )
            if len(names) < 2:
                continue  # need at least one gallery and one probe image
            for i, name in enumerate(names):
                role = GALLERY if i == 0 else PROBE
                self.records.append(
                    ImageRecord(subject, os.path.join(subject, name), role)
                )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)

    def indices_by_role(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.role == role]

    def gallery_index(self, subject_id: str) -> int:
        for i, r in enumerate(self.records):
            if r.subject_id == subject_id and r.role == GALLERY:
                return i
        raise KeyError(subject_id)

    def pixels(self, index: int) -> np.ndarray:
        """uint8 HxWx3 pixel data of one record (cached)."""
        if index not in self._cache:
            rec = self.records[index]
            self._cache[index] = load_image(
                os.path.join(self.root, rec.relpath), self.resolution
            )
        return self._cache[index]

    def image(self, index: int) -> np.ndarray:
        """Normalized float32 HxWx3 image of one record."""
        return normalize(self.pixels(index))

    def write_index(self, path: str) -> None:
        """Emit the post-filtering index file."""
        payload = {
            "root": os.path.abspath(self.root),
            "resolution": self.resolution,
            "n_subjects": len(self.subjects),
            "records": [
                {"subject": r.subject_id, "path": r.relpath, "role": r.role}
                for r in self.records
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)


def to_tensor(images: np.ndarray):
    """HxWx3 (or NxHxWx3) float array -> NCHW float32 torch tensor."""
    import torch

    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (N)HxWx3, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def from_tensor(batch) -> np.ndarray:
    """NCHW torch tensor -> NxHxWx3 float32 numpy array."""
    arr = batch.detach().cpu().numpy()
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# Comparison protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    """One impersonation fold: a fixed target subject, attacked by all
    probes of the other subjects.

    Synthesis conditions on ``target_probe`` (an image the attacker could
    plausibly hold); scoring compares against ``target_gallery`` (the
    enrolled image), so success must survive the probe-to-gallery gap.
    """
    target_subject: str
    target_gallery: int      # record index of the target's enrolled image
    target_probe: int        # record index of the conditioning image
    probe_indices: tuple[int, ...]


@dataclass
class PairProtocol:
    """Genuine/impostor comparison lists plus impersonation folds.

    Pairs are (probe_index, gallery_index) record-index tuples. Impostor
    pairs enumerate every probe against every image of every other
    subject; ``calibration_pairs`` is the seeded subset reserved for FAR
    threshold calibration, ``control_pairs`` the remainder (all pairs when
    calibration_fraction == 1.0).
    """
    genuine_pairs: list[tuple[int, int]]
    impostor_pairs: list[tuple[int, int]]
    calibration_pairs: list[tuple[int, int]]
    control_pairs: list[tuple[int, int]]
    folds: list[Fold]
    seed: int
    config: dict = field(default_factory=dict)

    def to_manifest(self, dataset: FaceDataset) -> dict:
        rel = lambda i: dataset.records[i].relpath

        def pairlist(pairs):
            return [[rel(a), rel(b)] for a, b in pairs]

        return {
            "seed": self.seed,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "genuine_pairs": pairlist(self.genuine_pairs),
            "impostor_pairs": pairlist(self.impostor_pairs),
            "calibration_pairs": pairlist(self.calibration_pairs),
            "control_pairs": pairlist(self.control_pairs),
            "folds": [
                {
                    "target_subject": f.target_subject,
                    "target_gallery": rel(f.target_gallery),
                    "target_probe": rel(f.target_probe),
                    "probes": [rel(i) for i in f.probe_indices],
                }
                for f in self.folds
            ],
        }

    def write_manifest(self, path: str, dataset: FaceDataset) -> None:
        with open(path, "w") as f:
            json.dump(self.to_manifest(dataset), f, indent=1)


def config_hash(config: dict) -> str:
    """Short stable hash of a JSON-serializable config dict."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def build_protocol(
    dataset: FaceDataset,
    calibration_fraction: float = 0.5,
    n_folds: int = 10,
    seed: int = 0,
) -> PairProtocol:
    """Build genuine/impostor pair lists and impersonation folds.

    Deterministic given (dataset, seed, config). Genuine pairs are each
    probe against its own subject's gallery image. Impostor pairs are each
    probe against every image of every other subject; a seeded fraction is
    held out for threshold calibration. Each fold fixes one randomly
    chosen target subject (folds are disjoint over targets).

    Raises:
        ProtocolInfeasibleError: fewer than 2 subjects survive filtering.
    """
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ProtocolInfeasibleError(
            f"protocol needs at least 2 subjects, got {len(subjects)}"
        )
    if not 0.0 < calibration_fraction <= 1.0:
        raise ValueError("calibration_fraction must be in (0, 1]")

    rng = np.random.default_rng(seed)
    gallery_of = {s: dataset.gallery_index(s) for s in subjects}

    genuine: list[tuple[int, int]] = []
    impostor: list[tuple[int, int]] = []
    for i in dataset.indices_by_role(PROBE):
        subj = dataset.records[i].subject_id
        genuine.append((i, gallery_of[subj]))
        for j, other in enumerate(dataset.records):
            if other.subject_id != subj:
                impostor.append((i, j))

    # Seeded holdout split of the impostor pairs for FAR calibration.
    n_cal = max(1, int(round(calibration_fraction * len(impostor))))
    order = rng.permutation(len(impostor))
    cal_ids = set(order[:n_cal].tolist())
    calibration = [impostor[k] for k in sorted(cal_ids)]
    if n_cal == len(impostor):
        control = list(impostor)
    else:
        control = [impostor[k] for k in range(len(impostor)) if k not in cal_ids]

    n_folds_eff = min(n_folds, len(subjects))
    if n_folds_eff < n_folds:
        raise ProtocolInfeasibleError(
            f"{n_folds} folds requested but only {len(subjects)} subjects"
        )
    target_subjects = [
        subjects[k] for k in rng.choice(len(subjects), size=n_folds, replace=False)
    ]
    folds = []
    for target in target_subjects:
        own_probes = [
            i for i in dataset.indices_by_role(PROBE)
            if dataset.records[i].subject_id == target
        ]
        target_probe = own_probes[rng.integers(len(own_probes))]
        probes = tuple(
            i for i in dataset.indices_by_role(PROBE)
            if dataset.records[i].subject_id != target
        )
        folds.append(Fold(target, gallery_of[target], target_probe, probes))

    config = {
        "calibration_fraction": calibration_fraction,
        "n_folds": n_folds,
        "resolution": dataset.resolution,
    }
    return PairProtocol(
        genuine_pairs=genuine,
        impostor_pairs=impostor,
        calibration_pairs=calibration,
        control_pairs=control,
        folds=folds,
        seed=seed,
        config=config,
    )
