"""Experiment harness: one subcommand per pipeline stage.

Typical flow on a fresh workspace::

    advmask make-data -c exp.yaml
    advmask train-matcher -c exp.yaml
    advmask train -c exp.yaml
    advmask attack -c exp.yaml --method maskgan
    advmask evaluate -c exp.yaml --method maskgan
    advmask sweep -c exp.yaml
    advmask ablate -c exp.yaml
    advmask visualize -c exp.yaml --method maskgan

Every command derives its inputs and outputs from the config's
``output_dir``, so stages can run in separate processes or be redone
individually.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from .config import ExperimentConfig, load_config, write_default_config
from .data import FaceDataset, build_protocol
from .errors import AdvMaskError
from .evaluation import (
    ablation_suite,
    epsilon_sweep,
    evaluate_impersonation,
    evaluate_obfuscation,
    generate_attack_set,
    save_visualization,
    score_shift_report,
    write_score_shift_csv,
    write_sweep_csv,
)
from .matcher import MatcherConfig, load_matcher, save_matcher, train_surrogate
from .toyfaces import generate_corpus
from .trainer import Trainer, load_latest_generator, train_generator


def _shared(fn):
    fn = click.option("--config", "-c", "config_path", type=click.Path(),
                      default=None, help="YAML experiment config.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--output-dir", type=click.Path(), default=None,
                      help="Override the config output directory.")(fn)
    fn = click.option("--deterministic", is_flag=True,
                      help="Force deterministic torch kernels.")(fn)
    return fn


def _load(config_path, seed, output_dir, deterministic) -> ExperimentConfig:
    if config_path is not None:
        if not os.path.exists(config_path):
            raise click.UsageError(f"config file not found: {config_path}")
        cfg = load_config(config_path)
    else:
        cfg = ExperimentConfig()
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = output_dir
    if deterministic:
        cfg.deterministic = True
    return cfg


def _dataset(cfg: ExperimentConfig) -> FaceDataset:
    if not os.path.isdir(cfg.data.root):
        raise click.UsageError(
            f"dataset root {cfg.data.root!r} does not exist (run make-data "
            "or point data.root at an image tree)"
        )
    return FaceDataset(cfg.data.root, resolution=cfg.data.resolution)


def _protocol(cfg: ExperimentConfig, dataset: FaceDataset):
    return build_protocol(
        dataset,
        calibration_fraction=cfg.data.calibration_fraction,
        n_folds=cfg.data.n_folds,
        seed=cfg.seed,
    )


def _matcher_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, cfg.matcher.checkpoint)


def _require_matcher(cfg: ExperimentConfig, differentiable: bool = True):
    path = _matcher_path(cfg)
    if not os.path.exists(path):
        raise click.ClickException(
            f"no matcher checkpoint at {path}; run train-matcher first"
        )
    return load_matcher(path, differentiable=differentiable)


def _train_run_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, "train", cfg.train.mode)


def _attack_dir(cfg: ExperimentConfig, method: str) -> str:
    return os.path.join(cfg.output_dir, "attacks", f"{method}-{cfg.train.mode}")


@click.group()
def main() -> None:
    """Adversarial face-mask synthesis experiments."""


@main.command("init-config")
@click.argument("path", type=click.Path())
def init_config(path: str) -> None:
    """Write a config template with every key at its default."""
    if os.path.exists(path):
        raise click.UsageError(f"{path} already exists; refusing to overwrite")
    write_default_config(path)
    click.echo(f"wrote {path}")


@main.command("make-data")
@_shared
@click.option("--force", is_flag=True, help="Regenerate even if the root exists.")
def make_data(config_path, seed, output_dir, deterministic, force) -> None:
    """Render the synthetic identity corpus at data.root."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    root = cfg.data.root
    if os.path.isdir(root) and os.listdir(root) and not force:
        raise click.UsageError(f"{root} already holds data; pass --force to regenerate")
    paths = generate_corpus(
        root,
        n_subjects=cfg.data.n_subjects,
        images_per_subject=cfg.data.images_per_subject,
        resolution=cfg.data.resolution,
        seed=cfg.seed,
    )
    click.echo(
        f"wrote {len(paths)} images / {cfg.data.n_subjects} subjects "
        f"at {cfg.data.resolution}x{cfg.data.resolution} under {root}"
    )


@main.command("train-matcher")
@_shared
def train_matcher(config_path, seed, output_dir, deterministic) -> None:
    """Train the embedding matcher and freeze the comparison protocol."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    dataset = _dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    m = cfg.matcher
    handle, report = train_surrogate(
        dataset,
        MatcherConfig(
            dim=m.dim, width=m.width, steps=m.steps, batch_size=m.batch_size,
            lr=m.lr, scale=m.scale, seed=cfg.seed, min_auc=m.min_auc,
        ),
    )
    save_matcher(handle, _matcher_path(cfg), report)
    protocol = _protocol(cfg, dataset)
    protocol.write_manifest(os.path.join(cfg.output_dir, "protocol.json"), dataset)
    dataset.write_index(os.path.join(cfg.output_dir, "dataset_index.json"))
    click.echo(
        f"matcher auc={report['auc']:.4f} "
        f"(holdout={'unseen' if report['holdout_is_unseen'] else 'reused'}) "
        f"-> {_matcher_path(cfg)}"
    )


@main.command("train")
@_shared
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint.")
def train(config_path, seed, output_dir, deterministic, resume) -> None:
    """Train the mask generator against the frozen matcher."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    dataset = _dataset(cfg)
    matcher = _require_matcher(cfg)
    run_dir = _train_run_dir(cfg)
    if resume:
        trainer = Trainer.resume(run_dir, dataset, matcher)
        click.echo(f"resuming {run_dir} from step {trainer.step}")
        start = trainer.step
        manifest = trainer.train()
        if manifest["steps_run"] <= start:
            click.echo(
                f"nothing to do: run already at its configured "
                f"{manifest['steps_run']} steps (a run dir's training length is "
                "fixed; use a fresh output dir to train longer)"
            )
            return
    else:
        if os.path.isdir(os.path.join(run_dir, "checkpoints")):
            raise click.UsageError(
                f"{run_dir} already holds checkpoints; pass --resume to continue "
                "or choose a fresh output dir"
            )
        _, _, manifest = train_generator(cfg.training_config(), dataset, matcher, run_dir)
    final = manifest["final_losses"] or {}
    click.echo(
        f"trained {manifest['steps_run']} steps in {manifest['wall_seconds']:.0f}s; "
        f"identity {manifest['identity_first_window']} -> "
        f"{manifest['identity_last_window']}; "
        f"total_g={final.get('total_g', float('nan')):.4f}; run at {run_dir}"
    )


@main.command("attack")
@_shared
@click.option("--method", "-m", type=click.Choice(["maskgan", "fgsm", "pgd"]), default=None,
              help="Attack family (default: config attack.method).")
def attack(config_path, seed, output_dir, deterministic, method) -> None:
    """Synthesize an adversarial image set for every probe."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    method = method or cfg.attack.method
    dataset = _dataset(cfg)
    matcher = _require_matcher(cfg)
    protocol = _protocol(cfg, dataset)
    generator = None
    if method == "maskgan":
        generator, extra = load_latest_generator(_train_run_dir(cfg))
        click.echo(f"generator from step {extra.get('step')}")
    out = _attack_dir(cfg, method)
    index = generate_attack_set(
        method,
        cfg.train.mode,
        dataset,
        protocol,
        matcher,
        out,
        generator=generator,
        budget=cfg.attack_budget(),
        seed=cfg.seed,
    )
    click.echo(
        f"{index['n_images']} adversarial images in {index['total_seconds']:.1f}s "
        f"-> {out}"
    )


@main.command("evaluate")
@_shared
@click.option("--method", "-m", type=click.Choice(["maskgan", "fgsm", "pgd"]), default=None)
@click.option("--attack-dir", type=click.Path(), default=None,
              help="Evaluate an explicit attack directory instead.")
def evaluate(config_path, seed, output_dir, deterministic, method, attack_dir) -> None:
    """Score an attack set under the verification protocol."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    method = method or cfg.attack.method
    attack_dir = attack_dir or _attack_dir(cfg, method)
    if not os.path.isdir(attack_dir):
        raise click.UsageError(f"no attack set at {attack_dir}; run attack first")
    dataset = _dataset(cfg)
    matcher = _require_matcher(cfg, differentiable=False)
    protocol = _protocol(cfg, dataset)
    kw = dict(far=cfg.eval.far, ssim_kw=cfg.ssim_kw())
    if cfg.train.mode == "obfuscation":
        report, details = evaluate_obfuscation(matcher, dataset, protocol, attack_dir, **kw)
        before, after = details["before"], details["after"]
    else:
        report, details = evaluate_impersonation(matcher, dataset, protocol, attack_dir, **kw)
        before = np.concatenate(details["fold_clean"])
        after = np.concatenate(details["fold_scores"])
    report_dir = os.path.join(cfg.output_dir, "reports")
    os.makedirs(report_dir, exist_ok=True)
    stem = f"{report.method}-{report.mode}"
    report.write(os.path.join(report_dir, f"{stem}.json"))
    shift = score_shift_report(before, after, details["tau"], bins=cfg.eval.hist_bins)
    write_score_shift_csv(os.path.join(report_dir, f"{stem}-scores.csv"), shift)
    std = f" +/- {report.success_std:.3f}" if report.success_std is not None else ""
    click.echo(
        f"{stem}: success={report.success:.3f}{std} "
        f"control={report.control_success:.3f} tau={report.tau:.4f} "
        f"ssim={report.ssim_mean:.4f} -> {report_dir}/{stem}.json"
    )


@main.command("sweep")
@_shared
def sweep(config_path, seed, output_dir, deterministic) -> None:
    """Retrain across hinge floors and tabulate success/quality."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    dataset = _dataset(cfg)
    matcher = _require_matcher(cfg)
    protocol = _protocol(cfg, dataset)
    root = os.path.join(cfg.output_dir, "sweep")
    steps = cfg.sweep.steps or cfg.train.steps

    def train_fn(eps: float) -> str:
        run_dir = os.path.join(root, f"eps-{eps:g}")
        weights = cfg.training_config().weights
        weights.epsilon = eps
        t_cfg = cfg.training_config(steps=steps, weights=weights)
        g, _, _ = train_generator(t_cfg, dataset, matcher, run_dir)
        a_dir = os.path.join(run_dir, "attack")
        generate_attack_set(
            "maskgan", cfg.train.mode, dataset, protocol, matcher, a_dir,
            generator=g, seed=cfg.seed,
        )
        return a_dir

    def eval_fn(a_dir: str) -> dict:
        if cfg.train.mode == "obfuscation":
            report, _ = evaluate_obfuscation(
                matcher, dataset, protocol, a_dir, far=cfg.eval.far, ssim_kw=cfg.ssim_kw()
            )
        else:
            report, _ = evaluate_impersonation(
                matcher, dataset, protocol, a_dir, far=cfg.eval.far, ssim_kw=cfg.ssim_kw()
            )
        return {"success": report.success, "ssim": report.ssim_mean}

    rows = epsilon_sweep(train_fn, eval_fn, cfg.sweep.eps_values)
    os.makedirs(root, exist_ok=True)
    write_sweep_csv(os.path.join(root, "sweep.csv"), rows)
    for row in rows:
        if "error" in row:
            click.echo(f"eps={row['epsilon']:g}: FAILED {row['error']}")
        else:
            click.echo(
                f"eps={row['epsilon']:g}: success={row['success']:.3f} "
                f"ssim={row['ssim']:.4f}"
            )
    click.echo(f"-> {root}/sweep.csv")


@main.command("ablate")
@_shared
def ablate(config_path, seed, output_dir, deterministic) -> None:
    """Knock out one loss term at a time and compare."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    dataset = _dataset(cfg)
    matcher = _require_matcher(cfg)
    protocol = _protocol(cfg, dataset)
    steps = cfg.ablate.steps or cfg.train.steps
    results = ablation_suite(
        cfg.training_config(steps=steps),
        dataset,
        protocol,
        matcher,
        os.path.join(cfg.output_dir, "ablation"),
        far=cfg.eval.far,
        variants=tuple(cfg.ablate.variants),
        ssim_kw=cfg.ssim_kw(),
    )
    for name, r in results.items():
        mask = f"{r['mask_l2_mean']:.2f}" if r["mask_l2_mean"] is not None else "n/a"
        click.echo(
            f"{name}: success={r['success']:.3f} ssim={r['ssim_mean']:.4f} "
            f"mask_l2={mask}"
        )
    click.echo(f"-> {cfg.output_dir}/ablation/ablation.json")


@main.command("visualize")
@_shared
@click.option("--method", "-m", type=click.Choice(["maskgan", "fgsm", "pgd"]), default=None)
@click.option("--attack-dir", type=click.Path(), default=None)
def visualize(config_path, seed, output_dir, deterministic, method, attack_dir) -> None:
    """Render probe / adversarial / mask / saliency grids."""
    cfg = _load(config_path, seed, output_dir, deterministic)
    method = method or cfg.attack.method
    attack_dir = attack_dir or _attack_dir(cfg, method)
    if not os.path.isdir(attack_dir):
        raise click.UsageError(f"no attack set at {attack_dir}; run attack first")
    dataset = _dataset(cfg)
    out = os.path.join(
        cfg.output_dir, "figures", f"{method}-{cfg.train.mode}.png"
    )
    path = save_visualization(
        dataset,
        attack_dir,
        out,
        n_examples=cfg.visualize.n_examples,
        threshold=cfg.visualize.threshold,
        seed=cfg.seed,
    )
    click.echo(f"wrote {path}")


def _wrap_errors():
    """Convert library errors to clean CLI failures (no tracebacks)."""
    import functools

    for name, cmd in list(main.commands.items()):
        orig = cmd.callback

        @functools.wraps(orig)
        def run(*args, __orig=orig, **kwargs):
            try:
                return __orig(*args, **kwargs)
            except AdvMaskError as e:
                raise click.ClickException(str(e)) from e

        cmd.callback = run


_wrap_errors()


if __name__ == "__main__":
    main()
