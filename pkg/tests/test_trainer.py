"""Trainer loop: config contract, artifacts, resume fidelity, failure paths."""
import json

import numpy as np
import pytest
import torch
from filelock import FileLock

from advmask.errors import (
    CheckpointMismatchError,
    MalformedInputError,
    ProtocolInfeasibleError,
    TrainingFailedError,
)
from advmask.losses import LossWeights
from advmask.matcher import EmbeddingNet, MatcherHandle
from advmask.networks import MaskGenerator
from advmask.trainer import (
    Trainer,
    TrainingConfig,
    load_latest_generator,
    sample_targets,
    train_generator,
)

def _tiny(**kw) -> TrainingConfig:
    base = dict(steps=6, batch_size=4, width=0.25, checkpoint_every=6, log_every=2)
    base.update(kw)
    return TrainingConfig(**base)


# -- config ------------------------------------------------------------------

def test_config_validation():
    for bad in (
        dict(mode="nope"),
        dict(conditioning="stack"),
        dict(steps=0),
        dict(batch_size=0),
        dict(d_steps_per_g=0),
        dict(lr=0.0),
        dict(beta1=1.0),
        dict(beta2=-0.1),
    ):
        with pytest.raises(MalformedInputError):
            TrainingConfig(**bad)


def test_config_generator_channels():
    assert TrainingConfig(mode="obfuscation").g_in_channels == 3
    assert TrainingConfig(mode="impersonation").g_in_channels == 6
    assert TrainingConfig(mode="impersonation", conditioning="probe_only").g_in_channels == 3


def test_config_dict_roundtrip():
    cfg = _tiny(mode="impersonation", weights=LossWeights(epsilon=8.0), seed=3)
    again = TrainingConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


# -- target sampling ---------------------------------------------------------

def test_sample_targets_never_self():
    labels = np.array([0, 0, 1, 1, 2, 2])
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = sample_targets(labels, rng)
        assert t.shape == (6,)
        assert np.all(labels[t] != labels)


def test_sample_targets_covers_pool():
    labels = np.array([0, 1, 1, 2])
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(200):
        seen.update(sample_targets(labels, rng, indices=np.array([0])).tolist())
    # subject 0's pool is exactly the three non-subject-0 images
    assert seen == {1, 2, 3}


def test_sample_targets_batch_indices():
    labels = np.array([0, 0, 1, 1])
    t = sample_targets(labels, np.random.default_rng(2), indices=np.array([2, 3]))
    assert t.shape == (2,) and np.all(labels[t] == 0)


def test_sample_targets_single_identity():
    with pytest.raises(ProtocolInfeasibleError):
        sample_targets(np.zeros(4, dtype=int), np.random.default_rng(0))


# -- construction guards -----------------------------------------------------

def test_trainer_requires_differentiable(small_dataset, tmp_path):
    net = EmbeddingNet(dim=16, width=0.25).eval()
    opaque = MatcherHandle(net, name="o", resolution=64, dim=16, differentiable=False)
    with pytest.raises(MalformedInputError):
        Trainer(_tiny(), small_dataset, opaque, str(tmp_path / "r"))


def test_trainer_rejects_resolution_mismatch(small_dataset, tmp_path):
    net = EmbeddingNet(dim=16, width=0.25).eval()
    m32 = MatcherHandle(net, name="m32", resolution=32, dim=16, differentiable=True)
    with pytest.raises(MalformedInputError):
        Trainer(_tiny(), small_dataset, m32, str(tmp_path / "r"))


def test_impersonation_needs_two_subjects(tmp_path, small_matcher):
    from advmask import FaceDataset, generate_corpus
    root = tmp_path / "solo"
    generate_corpus(str(root), n_subjects=1, images_per_subject=3, resolution=64, seed=1)
    ds = FaceDataset(str(root), resolution=64)
    with pytest.raises(ProtocolInfeasibleError):
        Trainer(_tiny(mode="impersonation"), ds, small_matcher, str(tmp_path / "r"))


# -- short runs and artifacts ------------------------------------------------

def test_short_run_artifacts(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "run"
    cfg = _tiny(steps=12, log_every=5, checkpoint_every=6)
    g, d, manifest = train_generator(cfg, small_dataset, small_matcher, str(run))
    assert isinstance(g, MaskGenerator)

    assert manifest["steps_run"] == 12
    assert manifest["checkpoints"] == [6, 12]
    assert manifest["mode"] == "obfuscation"
    assert all(np.isfinite(v) for v in manifest["final_losses"].values())
    assert manifest["dataset"]["subjects"] == 6
    assert manifest["matcher"]["dim"] == small_matcher.dim

    cfg_disk = json.loads((run / "config.json").read_text())
    assert cfg_disk == cfg.to_dict()
    lines = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == [5, 10, 12]
    for l in lines:
        for key in ("gan_g", "gan_d", "identity", "perturbation", "total_g", "seconds"):
            assert key in l
    assert (run / "manifest.json").exists()


def test_impersonation_short_run(small_dataset, small_matcher, tmp_path):
    cfg = _tiny(mode="impersonation", weights=LossWeights(epsilon=8.0))
    _, _, manifest = train_generator(cfg, small_dataset, small_matcher,
                                     str(tmp_path / "imp"))
    assert manifest["mode"] == "impersonation"
    assert manifest["steps_run"] == 6


def test_probe_only_conditioning_runs(small_dataset, small_matcher, tmp_path):
    cfg = _tiny(mode="impersonation", conditioning="probe_only", steps=3,
                checkpoint_every=3)
    g, _, _ = train_generator(cfg, small_dataset, small_matcher, str(tmp_path / "po"))
    assert g.arch["in_channels"] == 3


def test_ablation_flags_run(small_dataset, small_matcher, tmp_path):
    cfg = _tiny(use_gan=False, steps=3, checkpoint_every=3)
    _, _, manifest = train_generator(cfg, small_dataset, small_matcher,
                                     str(tmp_path / "nogan"))
    assert manifest["final_losses"]["gan_g"] == 0.0
    assert manifest["final_losses"]["gan_d"] == 0.0

    cfg2 = _tiny(weights=LossWeights(lambda_identity=0.0), steps=3, checkpoint_every=3)
    _, _, m2 = train_generator(cfg2, small_dataset, small_matcher, str(tmp_path / "noid"))
    # identity is still logged for analysis even though it draws no gradient
    assert np.isfinite(m2["final_losses"]["identity"])


def test_identity_descends(small_dataset, small_matcher, tmp_path):
    """Sixty steps of obfuscation training pull self-similarity down."""
    run = tmp_path / "descent"
    cfg = _tiny(steps=60, batch_size=4, log_every=1, checkpoint_every=60, seed=0)
    train_generator(cfg, small_dataset, small_matcher, str(run))
    lines = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    ident = [l["identity"] for l in lines]
    early = float(np.mean(ident[:10]))
    late = float(np.mean(ident[-10:]))
    assert late < early - 0.05, (early, late)


# -- checkpoint / resume -----------------------------------------------------

def test_resume_continues_exact_trajectory(small_dataset, small_matcher, tmp_path):
    cfg_a = _tiny(steps=15, checkpoint_every=5, seed=4)
    ga, _, _ = train_generator(cfg_a, small_dataset, small_matcher, str(tmp_path / "a"))

    cfg_b = _tiny(steps=10, checkpoint_every=5, seed=4)
    train_generator(cfg_b, small_dataset, small_matcher, str(tmp_path / "b"))
    t = Trainer.resume(str(tmp_path / "b"), small_dataset, small_matcher)
    assert t.step == 10
    t.config.steps = 15
    t.train()

    sa, sb = ga.state_dict(), t.G.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k


def test_resume_of_finished_run_keeps_manifest(small_dataset, small_matcher, tmp_path):
    """Resuming a run already at its configured end must not clobber the record."""
    run = tmp_path / "done"
    train_generator(_tiny(), small_dataset, small_matcher, str(run))
    before = (run / "manifest.json").read_text()
    t = Trainer.resume(str(run), small_dataset, small_matcher)
    manifest = t.train()
    assert (run / "manifest.json").read_text() == before
    assert manifest["final_losses"] is not None


def test_resume_picks_requested_step(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "steps"
    train_generator(_tiny(steps=12, checkpoint_every=4), small_dataset,
                    small_matcher, str(run))
    t = Trainer.resume(str(run), small_dataset, small_matcher, step=8)
    assert t.step == 8
    with pytest.raises(CheckpointMismatchError):
        Trainer.resume(str(run), small_dataset, small_matcher, step=7)


def test_resume_without_config(small_dataset, small_matcher, tmp_path):
    with pytest.raises(CheckpointMismatchError):
        Trainer.resume(str(tmp_path / "nothing"), small_dataset, small_matcher)


def test_resume_rejects_config_drift(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "drift"
    train_generator(_tiny(), small_dataset, small_matcher, str(run))
    cfg = json.loads((run / "config.json").read_text())
    cfg["lr"] = 5e-4  # silently retuned between sessions
    (run / "config.json").write_text(json.dumps(cfg))
    with pytest.raises(CheckpointMismatchError):
        Trainer.resume(str(run), small_dataset, small_matcher)


def test_load_latest_generator(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "latest"
    train_generator(_tiny(steps=12, checkpoint_every=6), small_dataset,
                    small_matcher, str(run))
    g, extra = load_latest_generator(str(run))
    assert isinstance(g, MaskGenerator) and extra["step"] == 12
    g8, extra8 = load_latest_generator(str(run), step=6)
    assert extra8["step"] == 6
    with pytest.raises(CheckpointMismatchError):
        load_latest_generator(str(run), step=7)
    with pytest.raises(CheckpointMismatchError):
        load_latest_generator(str(tmp_path / "void"))


# -- failure paths -----------------------------------------------------------

def test_nan_dumps_crime_scene(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "nan"
    t = Trainer(_tiny(), small_dataset, small_matcher, str(run))
    with torch.no_grad():
        next(t.G.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingFailedError):
        t.train_step(np.array([0, 1]))
    scene = torch.load(str(run / "crime_scene.pt"), weights_only=False)
    assert set(scene) >= {"step", "indices", "losses", "G", "D"}


def test_run_dir_lock_excludes_second_trainer(small_dataset, small_matcher, tmp_path):
    run = tmp_path / "locked"
    t = Trainer(_tiny(), small_dataset, small_matcher, str(run))
    held = FileLock(str(run / ".lock"))
    held.acquire()
    try:
        with pytest.raises(TrainingFailedError):
            t.train()
    finally:
        held.release()
