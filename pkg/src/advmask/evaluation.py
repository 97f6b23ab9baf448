"""Attack-set generation and verification-protocol evaluation.

An attack set is a directory of adversarial PNGs plus an ``index.json``
recording, for every probe, where its adversarial twin lives, what it
was steered toward, and how long synthesis took. Evaluation re-reads
those PNGs from disk so the scored pixels are exactly what a downstream
consumer would see (quantization included).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from PIL import Image

from .baselines import AttackBudget, fgsm, pgd
from .data import FaceDataset, PairProtocol, load_image, normalize, denormalize, to_tensor
from .errors import MalformedInputError
from .matcher import MatcherHandle, embed_dataset, threshold_at_far
from .metrics import (
    mask_saliency,
    mse_psnr,
    ssim,
    success_rate_impersonation,
    success_rate_obfuscation,
)
from .networks import MaskGenerator, compose
from .trainer import TrainingConfig, sample_targets, train_generator

METHODS = ("maskgan", "fgsm", "pgd")
_BATCH = 32


# --------------------------------------------------------------------------
# Attack-set generation
# --------------------------------------------------------------------------

def _probe_indices(protocol: PairProtocol) -> list[int]:
    return sorted({i for i, _ in protocol.genuine_pairs})


def _save_adv(batch: torch.Tensor, paths: list[str]) -> None:
    from .data import from_tensor

    arr = from_tensor(batch)
    for img, path in zip(arr, paths):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(denormalize(img)).save(path)


def _synthesize(
    method: str,
    x: torch.Tensor,
    y: torch.Tensor | None,
    matcher: MatcherHandle,
    generator: MaskGenerator | None,
    budget: AttackBudget | None,
    mode: str,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, np.ndarray | None]:
    """Returns (adversarial batch, per-image mask L2 norms or None)."""
    if method == "maskgan":
        if generator is None:
            raise MalformedInputError("maskgan attacks need a trained generator")
        want = generator.arch["in_channels"]
        g_in = x
        if want == 6:
            if y is None:
                raise MalformedInputError(
                    "this generator is target-conditioned; no targets supplied"
                )
            g_in = torch.cat([x, y], dim=1)
        with torch.no_grad():
            mask = generator(g_in)
            adv = compose(x, mask)
        norms = torch.linalg.vector_norm(mask.flatten(1), dim=1).numpy()
        return adv, norms
    if method == "fgsm":
        return fgsm(matcher, x, budget, mode=mode, targets=y), None
    if method == "pgd":
        return pgd(matcher, x, budget, mode=mode, targets=y, rng=rng), None
    raise MalformedInputError(f"unknown attack method {method!r}, want one of {METHODS}")


def generate_attack_set(
    method: str,
    mode: str,
    dataset: FaceDataset,
    protocol: PairProtocol,
    matcher: MatcherHandle,
    out_dir: str,
    generator: MaskGenerator | None = None,
    budget: AttackBudget | None = None,
    seed: int = 0,
) -> dict:
    """Synthesize adversarial images for every probe in the protocol.

    Obfuscation attacks each probe once; impersonation attacks each fold's
    probes toward that fold's target. Gradient baselines get a default
    budget when none is given; in obfuscation mode their targets are
    seeded random non-self images (pgd needs one, fgsm does not).
    """
    if mode not in ("obfuscation", "impersonation"):
        raise MalformedInputError(f"unknown mode {mode!r}")
    if method in ("fgsm", "pgd") and budget is None:
        budget = AttackBudget()
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    entries: list[dict] = []
    t_start = time.perf_counter()
    gen = generator.eval() if generator is not None else None

    def run_batch(idxs: list[int], y_idx: list[int] | None, sub: str, fold: int | None):
        x = to_tensor(np.stack([dataset.image(i) for i in idxs]))
        y = None
        y_rel = [None] * len(idxs)
        if y_idx is not None:
            y = to_tensor(np.stack([dataset.image(j) for j in y_idx]))
            y_rel = [dataset.records[j].relpath for j in y_idx]
        t0 = time.perf_counter()
        adv, norms = _synthesize(method, x, y, matcher, gen, budget, mode, rng)
        per_image = (time.perf_counter() - t0) / len(idxs)
        rels = [dataset.records[i].relpath for i in idxs]
        paths = [os.path.join(out_dir, "images", sub, r) for r in rels]
        _save_adv(adv, paths)
        for k, i in enumerate(idxs):
            e = {
                "probe": rels[k],
                "subject": dataset.records[i].subject_id,
                "adv": os.path.join("images", sub, rels[k]),
                "target": y_rel[k],
                "seconds": per_image,
            }
            if fold is not None:
                e["fold"] = fold
            if norms is not None:
                e["mask_l2"] = float(norms[k])
            entries.append(e)

    if mode == "obfuscation":
        probes = _probe_indices(protocol)
        labels = np.array(
            [dataset.subjects.index(r.subject_id) for r in dataset.records]
        )
        for lo in range(0, len(probes), _BATCH):
            chunk = probes[lo : lo + _BATCH]
            y_idx = None
            if method == "pgd":  # evade by steering toward sampled others
                y_idx = sample_targets(labels, rng, np.array(chunk)).tolist()
            run_batch(chunk, y_idx, "", None)
    else:
        if not protocol.folds:
            raise MalformedInputError("protocol has no impersonation folds")
        for f_id, fold in enumerate(protocol.folds):
            for lo in range(0, len(fold.probe_indices), _BATCH):
                chunk = list(fold.probe_indices[lo : lo + _BATCH])
                y_idx = [fold.target_probe] * len(chunk)
                run_batch(chunk, y_idx, f"fold{f_id:02d}", f_id)

    index = {
        "method": method,
        "mode": mode,
        "seed": seed,
        "matcher": matcher.name,
        "budget": budget.to_dict() if budget is not None else None,
        "generator_arch": gen.arch if gen is not None else None,
        "n_images": len(entries),
        "total_seconds": time.perf_counter() - t_start,
        "entries": entries,
    }
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=1)
    return index


def load_attack_index(attack_dir: str) -> dict:
    path = os.path.join(attack_dir, "index.json")
    if not os.path.exists(path):
        raise MalformedInputError(f"{attack_dir} has no index.json")
    with open(path) as f:
        return json.load(f)


def _load_adv(attack_dir: str, entry: dict, resolution: int) -> np.ndarray:
    return load_image(os.path.join(attack_dir, entry["adv"]), resolution)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class AttackReport:
    method: str
    mode: str
    far: float
    tau: float
    n: int                       # scored comparisons
    success: float
    success_std: float | None = None
    per_fold: list[float] | None = None
    control_success: float | None = None  # same decision rule on clean images
    far_holdout: float | None = None      # held-out impostor accept rate
    ssim_mean: float | None = None
    ssim_p05: float | None = None
    mse_mean: float | None = None
    psnr_mean: float | None = None
    score_mean_before: float | None = None
    score_mean_after: float | None = None
    seconds_per_image: float | None = None
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def _image_quality(
    dataset: FaceDataset,
    attack_dir: str,
    entries: list[dict],
    probe_of: dict[str, int],
    ssim_kw: dict,
) -> dict:
    ssims, mses, psnrs, identical = [], [], [], 0
    for e in entries:
        clean = dataset.pixels(probe_of[e["probe"]])
        adv = _load_adv(attack_dir, e, dataset.resolution)
        ssims.append(ssim(clean, adv, **ssim_kw))
        m, p = mse_psnr(clean, adv)
        mses.append(m)
        if p is None:
            identical += 1
        else:
            psnrs.append(p)
    s = np.array(ssims)
    return {
        "ssim_mean": float(s.mean()),
        "ssim_p05": float(np.percentile(s, 5)),
        "mse_mean": float(np.mean(mses)),
        "psnr_mean": float(np.mean(psnrs)) if psnrs else None,
        "n_identical": identical,
        "ssim_values": s,
    }


def evaluate_obfuscation(
    matcher: MatcherHandle,
    dataset: FaceDataset,
    protocol: PairProtocol,
    attack_dir: str,
    far: float = 0.01,
    ssim_kw: dict | None = None,
) -> tuple[AttackReport, dict]:
    """Score an obfuscation attack set under the verification protocol.

    Returns the report plus raw arrays (before/after genuine scores,
    per-image ssim) for downstream analysis.
    """
    index = load_attack_index(attack_dir)
    if index["mode"] != "obfuscation":
        raise MalformedInputError(f"attack set at {attack_dir} is {index['mode']!r}")
    ssim_kw = ssim_kw or {}
    emb = embed_dataset(matcher, dataset)
    cal = np.array([emb[i] @ emb[j] for i, j in protocol.calibration_pairs])
    tau = threshold_at_far(cal, far)
    holdout = np.array([emb[i] @ emb[j] for i, j in protocol.control_pairs])

    probe_of = {dataset.records[i].relpath: i for i in range(len(dataset))}
    gallery_of = {s: dataset.gallery_index(s) for s in dataset.subjects}
    entries = index["entries"]
    adv_imgs = np.stack(
        [normalize(_load_adv(attack_dir, e, dataset.resolution)) for e in entries]
    )
    adv_emb = matcher.embed_images(adv_imgs)
    before = np.array(
        [emb[probe_of[e["probe"]]] @ emb[gallery_of[e["subject"]]] for e in entries]
    )
    after = np.array(
        [adv_emb[k] @ emb[gallery_of[e["subject"]]] for k, e in enumerate(entries)]
    )
    quality = _image_quality(dataset, attack_dir, entries, probe_of, ssim_kw)
    report = AttackReport(
        method=index["method"],
        mode="obfuscation",
        far=far,
        tau=tau,
        n=len(entries),
        success=success_rate_obfuscation(after, tau),
        control_success=success_rate_obfuscation(before, tau),
        far_holdout=float((holdout >= tau).mean()) if holdout.size else None,
        ssim_mean=quality["ssim_mean"],
        ssim_p05=quality["ssim_p05"],
        mse_mean=quality["mse_mean"],
        psnr_mean=quality["psnr_mean"],
        score_mean_before=float(before.mean()),
        score_mean_after=float(after.mean()),
        seconds_per_image=float(np.median([e["seconds"] for e in entries])),
        extras={"n_identical": quality["n_identical"]},
    )
    details = {"before": before, "after": after, "ssim": quality["ssim_values"], "tau": tau}
    return report, details


def evaluate_impersonation(
    matcher: MatcherHandle,
    dataset: FaceDataset,
    protocol: PairProtocol,
    attack_dir: str,
    far: float = 0.01,
    ssim_kw: dict | None = None,
) -> tuple[AttackReport, dict]:
    """Score an impersonation attack set fold by fold.

    Success for a fold is the fraction of adversarial probes accepted
    against the fold target's enrolled image; the report carries the
    fold mean and population standard deviation.
    """
    index = load_attack_index(attack_dir)
    if index["mode"] != "impersonation":
        raise MalformedInputError(f"attack set at {attack_dir} is {index['mode']!r}")
    ssim_kw = ssim_kw or {}
    emb = embed_dataset(matcher, dataset)
    cal = np.array([emb[i] @ emb[j] for i, j in protocol.calibration_pairs])
    tau = threshold_at_far(cal, far)
    holdout = np.array([emb[i] @ emb[j] for i, j in protocol.control_pairs])

    probe_of = {dataset.records[i].relpath: i for i in range(len(dataset))}
    entries = index["entries"]
    n_folds = len(protocol.folds)
    fold_adv_scores: list[list[float]] = [[] for _ in range(n_folds)]
    fold_clean_scores: list[list[float]] = [[] for _ in range(n_folds)]
    for lo in range(0, len(entries), _BATCH):
        chunk = entries[lo : lo + _BATCH]
        advs = np.stack(
            [normalize(_load_adv(attack_dir, e, dataset.resolution)) for e in chunk]
        )
        adv_emb = matcher.embed_images(advs)
        for k, e in enumerate(chunk):
            f_id = e["fold"]
            g = protocol.folds[f_id].target_gallery
            fold_adv_scores[f_id].append(float(adv_emb[k] @ emb[g]))
            fold_clean_scores[f_id].append(float(emb[probe_of[e["probe"]]] @ emb[g]))
    adv_arrays = [np.array(s) for s in fold_adv_scores]
    mean, std, rates = success_rate_impersonation(adv_arrays, tau)
    control_mean, _, _ = success_rate_impersonation(
        [np.array(s) for s in fold_clean_scores], tau
    )
    quality = _image_quality(dataset, attack_dir, entries, probe_of, ssim_kw)
    report = AttackReport(
        method=index["method"],
        mode="impersonation",
        far=far,
        tau=tau,
        n=len(entries),
        success=mean,
        success_std=std,
        per_fold=rates,
        control_success=control_mean,
        far_holdout=float((holdout >= tau).mean()) if holdout.size else None,
        ssim_mean=quality["ssim_mean"],
        ssim_p05=quality["ssim_p05"],
        mse_mean=quality["mse_mean"],
        psnr_mean=quality["psnr_mean"],
        score_mean_after=float(np.concatenate(adv_arrays).mean()),
        score_mean_before=float(
            np.concatenate([np.array(s) for s in fold_clean_scores]).mean()
        ),
        seconds_per_image=float(np.median([e["seconds"] for e in entries])),
        extras={"n_identical": quality["n_identical"]},
    )
    details = {
        "fold_scores": adv_arrays,
        "fold_clean": [np.array(s) for s in fold_clean_scores],
        "ssim": quality["ssim_values"],
        "tau": tau,
    }
    return report, details


# --------------------------------------------------------------------------
# Score-shift analysis
# --------------------------------------------------------------------------

def score_shift_report(
    before: np.ndarray, after: np.ndarray, tau: float, bins: int = 40
) -> dict:
    """Histogram the score distribution before/after attack on [-1, 1]."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise MalformedInputError("before/after score arrays differ in length")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hb, _ = np.histogram(before, bins=edges)
    ha, _ = np.histogram(after, bins=edges)
    return {
        "tau": tau,
        "bins": bins,
        "edges": edges.tolist(),
        "hist_before": hb.tolist(),
        "hist_after": ha.tolist(),
        "mean_before": float(before.mean()),
        "mean_after": float(after.mean()),
        "mean_shift": float((after - before).mean()),
        "frac_crossed_down": float(((before >= tau) & (after < tau)).mean()),
        "frac_crossed_up": float(((before < tau) & (after >= tau)).mean()),
    }


def write_score_shift_csv(path: str, report: dict) -> None:
    import csv

    edges = report["edges"]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["bin_lo", "bin_hi", "count_before", "count_after"])
        for k in range(report["bins"]):
            wr.writerow(
                [edges[k], edges[k + 1], report["hist_before"][k], report["hist_after"][k]]
            )


# --------------------------------------------------------------------------
# Sweeps and ablations
# --------------------------------------------------------------------------

def epsilon_sweep(train_fn, eval_fn, eps_list: list[float]) -> list[dict]:
    """Train/evaluate at each hinge floor; one failed point does not stop
    the sweep (its row records the error instead)."""
    rows = []
    for eps in eps_list:
        row: dict = {"epsilon": eps}
        try:
            artifact = train_fn(eps)
            row.update(eval_fn(artifact))
        except Exception as e:  # noqa: BLE001 - a sweep survives bad points
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
    return rows


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    import csv

    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([r.get(k, "") for k in keys])


def count_inversions(values: list[float], direction: str = "nondecreasing") -> int:
    """Adjacent-pair violations of the expected trend."""
    v = list(values)
    if direction == "nondecreasing":
        return sum(1 for a, b in zip(v, v[1:]) if b < a)
    if direction == "nonincreasing":
        return sum(1 for a, b in zip(v, v[1:]) if b > a)
    raise MalformedInputError(f"unknown direction {direction!r}")

ABLATION_VARIANTS = ("full", "no_identity", "no_perturbation", "no_gan")


def ablation_variant_config(base: TrainingConfig, variant: str) -> TrainingConfig:
    d = base.to_dict()
    if variant == "full":
        pass
    elif variant == "no_identity":
        d["weights"]["lambda_identity"] = 0.0
    elif variant == "no_perturbation":
        d["weights"]["lambda_perturbation"] = 0.0
    elif variant == "no_gan":
        d["use_gan"] = False
    else:
        raise MalformedInputError(
            f"unknown ablation variant {variant!r}, want one of {ABLATION_VARIANTS}"
        )
    return TrainingConfig.from_dict(d)


def ablation_suite(
    base_config: TrainingConfig,
    dataset: FaceDataset,
    protocol: PairProtocol,
    matcher: MatcherHandle,
    out_root: str,
    far: float = 0.01,
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    ssim_kw: dict | None = None,
) -> dict:
    """Retrain the generator with one loss term knocked out at a time and
    evaluate each variant under the identical protocol."""
    results: dict[str, dict] = {}
    for variant in variants:
        cfg = ablation_variant_config(base_config, variant)
        run_dir = os.path.join(out_root, variant)
        g, _, manifest = train_generator(cfg, dataset, matcher, run_dir)
        attack_dir = os.path.join(run_dir, "attack")
        index = generate_attack_set(
            "maskgan", cfg.mode, dataset, protocol, matcher, attack_dir,
            generator=g, seed=cfg.seed,
        )
        report, _ = evaluate_obfuscation(
            matcher, dataset, protocol, attack_dir, far=far, ssim_kw=ssim_kw
        )
        mask_l2 = [e["mask_l2"] for e in index["entries"] if "mask_l2" in e]
        results[variant] = {
            "success": report.success,
            "control_success": report.control_success,
            "ssim_mean": report.ssim_mean,
            "mask_l2_mean": float(np.mean(mask_l2)) if mask_l2 else None,
            "report": report.to_json(),
            "wall_seconds": manifest["wall_seconds"],
        }
    with open(os.path.join(out_root, "ablation.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return results


# --------------------------------------------------------------------------
# Visualization
# --------------------------------------------------------------------------

def save_visualization(
    dataset: FaceDataset,
    attack_dir: str,
    out_path: str,
    n_examples: int = 4,
    threshold: float = 0.40,
    seed: int = 0,
) -> str:
    """Grid PNG: one row per example, columns probe / adversarial /
    effective-mask magnitude / saliency at the given threshold."""
    index = load_attack_index(attack_dir)
    entries = index["entries"]
    if not entries:
        raise MalformedInputError(f"attack set at {attack_dir} is empty")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(entries), size=min(n_examples, len(entries)), replace=False)
    probe_of = {dataset.records[i].relpath: i for i in range(len(dataset))}

    rows = []
    for k in sorted(pick.tolist()):
        e = entries[k]
        clean_u8 = dataset.pixels(probe_of[e["probe"]])
        adv_u8 = _load_adv(attack_dir, e, dataset.resolution)
        delta = (normalize(adv_u8) - normalize(clean_u8)) / 2.0
        mag = np.abs(delta).max(axis=2)
        mag_u8 = np.clip(mag * 255.0 / max(mag.max(), 1e-6), 0, 255).astype(np.uint8)
        sal = mask_saliency(delta, threshold).map.astype(np.uint8) * 255
        panels = [
            clean_u8,
            adv_u8,
            np.repeat(mag_u8[:, :, None], 3, axis=2),
            np.repeat(sal[:, :, None], 3, axis=2),
        ]
        rows.append(panels)

    r = dataset.resolution
    pad = 2
    width = 4 * r + 5 * pad
    height = len(rows) * r + (len(rows) + 1) * pad
    canvas = np.full((height, width, 3), 24, dtype=np.uint8)
    for ri, panels in enumerate(rows):
        y0 = pad + ri * (r + pad)
        for ci, panel in enumerate(panels):
            x0 = pad + ci * (r + pad)
            canvas[y0 : y0 + r, x0 : x0 + r] = panel
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    Image.fromarray(canvas).save(out_path)
    return out_path
