"""Face-embedding matcher: a small CNN trained with a cosine-softmax
identity classifier, wrapped in a handle the attack side can query.

The handle abstracts over white-box (differentiable) and black-box
(eval-only) use. Training the generator or running gradient baselines
requires a differentiable handle; scoring a verification protocol works
with either.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FaceDataset, config_hash, to_tensor
from .errors import (
    CheckpointMismatchError,
    MalformedInputError,
    ProtocolInfeasibleError,
    ShapeMismatchError,
    TrainingFailedError,
)
from .metrics import roc_auc


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit embeddings (a plain dot product)."""
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ShapeMismatchError(f"embedding dims differ: {va.shape} vs {vb.shape}")
    return float(va @ vb)


class EmbeddingNet(nn.Module):
    """Strided conv stack -> global average pool -> unit-norm embedding."""

    def __init__(self, dim: int = 128, width: float = 1.0):
        super().__init__()
        c = lambda k: max(8, int(round(k * width)))
        chans = [c(32), c(64), c(128), c(128)]
        layers, prev = [], 3
        for ch in chans:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, dim)
        self.dim = dim
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return F.normalize(self.head(h), dim=1)


class MatcherHandle:
    """A trained matcher plus the contract metadata attacks rely on."""

    def __init__(
        self,
        net: nn.Module,
        name: str,
        resolution: int,
        dim: int,
        differentiable: bool = True,
    ):
        self.net = net.eval()
        self.name = name
        self.resolution = resolution
        self.dim = dim
        self.differentiable = differentiable

    def embed(self, batch: torch.Tensor) -> torch.Tensor:
        """Embed an NCHW batch; keeps autograd state of the input."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ShapeMismatchError(f"expected NCHW rgb batch, got {tuple(batch.shape)}")
        if batch.shape[2] != self.resolution or batch.shape[3] != self.resolution:
            raise ShapeMismatchError(
                f"matcher {self.name!r} expects {self.resolution}x{self.resolution} "
                f"inputs, got {batch.shape[2]}x{batch.shape[3]}"
            )
        if not self.differentiable:
            with torch.no_grad():
                return self.net(batch)
        return self.net(batch)

    def embed_images(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Embed HxWx3 or NxHxWx3 normalized images; returns Nxd numpy."""
        t = to_tensor(images)
        out = []
        with torch.no_grad():
            for i in range(0, t.shape[0], batch_size):
                out.append(self.net(t[i : i + batch_size]))
        return torch.cat(out).numpy()


def threshold_at_far(scores: np.ndarray, far: float) -> float:
    """Smallest observed score whose accept fraction is at most `far`.

    Accepting means score >= threshold. If even the maximum observed
    score accepts too often, returns the next float above it (so nothing
    observed is accepted).
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise MalformedInputError("cannot calibrate on an empty score set")
    if not (0.0 < far <= 1.0):
        raise MalformedInputError(f"far must be in (0, 1], got {far}")
    need = math.ceil(1.0 / far)
    if s.size < need:
        warnings.warn(
            f"{s.size} impostor scores cannot resolve far={far} "
            f"(need at least {need}); threshold will be conservative",
            stacklevel=2,
        )
    # fraction of scores >= s[i] must count ties: use each value's first
    # occurrence in the sorted order, not its position
    n = s.size
    first = np.searchsorted(s, s, side="left")
    accept_frac = (n - first) / n
    ok = np.nonzero(accept_frac <= far)[0]
    if ok.size == 0:
        return float(np.nextafter(s[-1], np.inf))
    return float(s[ok[0]])


@dataclass
class ThresholdCalibration:
    tau: float
    far: float
    n_impostor: int

    def to_json(self) -> dict:
        return asdict(self)


def calibrate_threshold(
    matcher: MatcherHandle,
    dataset: FaceDataset,
    impostor_pairs: list[tuple[int, int]],
    far: float,
) -> ThresholdCalibration:
    """Pick the accept threshold hitting the target false accept rate."""
    scores = score_pairs(matcher, dataset, impostor_pairs)
    tau = threshold_at_far(scores, far)
    return ThresholdCalibration(tau=tau, far=far, n_impostor=len(impostor_pairs))


def score_pairs(
    matcher: MatcherHandle,
    dataset: FaceDataset,
    pairs: list[tuple[int, int]],
    embeddings: np.ndarray | None = None,
) -> np.ndarray:
    """Cosine scores for (probe_index, gallery_index) pairs.

    Pass precomputed per-record `embeddings` to avoid re-embedding when
    scoring several pair lists against the same dataset.
    """
    if embeddings is None:
        embeddings = embed_dataset(matcher, dataset)
    out = np.empty(len(pairs), dtype=np.float64)
    for k, (i, j) in enumerate(pairs):
        out[k] = embeddings[i] @ embeddings[j]
    return out


def embed_dataset(matcher: MatcherHandle, dataset: FaceDataset) -> np.ndarray:
    imgs = np.stack([dataset.image(i) for i in range(len(dataset))])
    return matcher.embed_images(imgs)


@dataclass
class MatcherConfig:
    dim: int = 64
    width: float = 1.0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    scale: float = 16.0  # cosine-logit temperature
    seed: int = 0
    min_auc: float = 0.6
    log_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


class _CosineClassifier(nn.Module):
    def __init__(self, dim: int, n_classes: int, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, dim) * 0.01)
        self.scale = scale

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.scale * emb @ F.normalize(self.weight, dim=1).t()


def train_surrogate(
    dataset: FaceDataset,
    config: MatcherConfig | None = None,
    name: str = "surrogate",
) -> tuple[MatcherHandle, dict]:
    """Train an identity classifier on the corpus; returns the embedding
    matcher plus a report with held-out verification AUC.

    One image per subject (the last probe, when a subject has at least
    two probes) is held out for the AUC check; subjects with a single
    probe contribute training data only.
    """
    config = config or MatcherConfig()
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ProtocolInfeasibleError(
            f"matcher training needs at least 2 identities, found {len(subjects)}"
        )
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    by_subject: dict[str, list[int]] = {s: [] for s in subjects}
    for i, rec in enumerate(dataset.records):
        by_subject[rec.subject_id].append(i)
    holdout, train_idx = [], []
    for s in subjects:
        idxs = by_subject[s]
        probes = idxs[1:]  # first is the enrolled image
        if len(probes) >= 2:
            holdout.append(probes[-1])
            train_idx.extend(idxs[:-1])
        else:
            train_idx.extend(idxs)
    label_of = {s: k for k, s in enumerate(subjects)}
    train_labels = np.array([label_of[dataset.records[i].subject_id] for i in train_idx])
    train_imgs = to_tensor(np.stack([dataset.image(i) for i in train_idx]))

    net = EmbeddingNet(dim=config.dim, width=config.width)
    clf = _CosineClassifier(config.dim, len(subjects), config.scale)
    opt = torch.optim.Adam(
        list(net.parameters()) + list(clf.parameters()), lr=config.lr
    )
    net.train()
    losses = []
    for step in range(config.steps):
        pick = rng.integers(0, len(train_idx), size=config.batch_size)
        x = train_imgs[pick]
        y = torch.from_numpy(train_labels[pick]).long()
        logits = clf(net(x))
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if not math.isfinite(losses[-1]):
            raise TrainingFailedError(
                f"matcher loss became non-finite at step {step}"
            )
    net.eval()

    handle = MatcherHandle(
        net, name=name, resolution=dataset.resolution, dim=config.dim
    )
    emb = embed_dataset(handle, dataset)
    eval_idx = holdout if holdout else [by_subject[s][-1] for s in subjects]
    genuine, impostor = [], []
    for i in eval_idx:
        si = dataset.records[i].subject_id
        for s in subjects:
            score = float(emb[i] @ emb[by_subject[s][0]])
            (genuine if s == si else impostor).append(score)
    auc = roc_auc(np.array(genuine), np.array(impostor))
    report = {
        "auc": auc,
        "final_loss": float(np.mean(losses[-50:])),
        "steps": config.steps,
        "n_train_images": len(train_idx),
        "n_holdout_images": len(eval_idx),
        "holdout_is_unseen": bool(holdout),
        "config_hash": config_hash(config.to_dict()),
    }
    if auc <= config.min_auc:
        raise TrainingFailedError(
            f"matcher failed to separate identities: holdout auc={auc:.3f} "
            f"(minimum {config.min_auc}), final loss {report['final_loss']:.3f}"
        )
    return handle, report


def save_matcher(handle: MatcherHandle, path: str, report: dict | None = None) -> None:
    net = handle.net
    if not isinstance(net, EmbeddingNet):
        raise CheckpointMismatchError("only EmbeddingNet matchers can be checkpointed")
    payload = {
        "state_dict": net.state_dict(),
        "arch": {"dim": net.dim, "width": net.width},
        "name": handle.name,
        "resolution": handle.resolution,
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(payload, path)
    meta = {
        "name": handle.name,
        "resolution": handle.resolution,
        "dim": handle.dim,
        "report": report or {},
    }
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_matcher(path: str, differentiable: bool = True) -> MatcherHandle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    try:
        arch = payload["arch"]
        net = EmbeddingNet(dim=arch["dim"], width=arch["width"])
        net.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointMismatchError(f"cannot restore matcher from {path}: {e}") from e
    return MatcherHandle(
        net,
        name=payload["name"],
        resolution=payload["resolution"],
        dim=arch["dim"],
        differentiable=differentiable,
    )
