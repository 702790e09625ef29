"""Command-line front end: train models, run campaigns, emit reports.

Exit codes: 0 success, 1 contract violation, 2 configuration/IO/parse error.
"""

from __future__ import annotations

import sys

import click

from .errors import CheckpointError, ConfigError, ContractViolation, IdxFormatError
from .harness import (compare, parse_config, reconstruction_gap_from_spec,
                      run_experiment, train_np_from_spec, train_victim_from_spec)


def _load_spec(config, seed, out_dir, seed_key="seed"):
    overrides = {}
    if seed is not None:
        overrides[seed_key] = seed
    if out_dir is not None:
        overrides["out_dir"] = out_dir
    return parse_config(config, overrides)


def _guarded(fn):
    try:
        fn()
    except ContractViolation as exc:
        click.echo(f"contract violation: {exc}", err=True)
        sys.exit(1)
    except (ConfigError, IdxFormatError, CheckpointError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


def _common_options(fn):
    fn = click.option("--out-dir", default=None, help="Override the output directory.")(fn)
    fn = click.option("--seed", default=None, type=int, help="Override the relevant seed.")(fn)
    fn = click.option("--config", required=True, type=click.Path(), help="Experiment config file.")(fn)
    return fn


@click.group()
def main():
    """Query-efficient black-box attacks with exact query accounting."""


@main.command("train-target")
@_common_options
def train_target_cmd(config, seed, out_dir):
    """Train the victim classifier and write its CLF1 checkpoint."""
    def body():
        spec = _load_spec(config, seed, out_dir, seed_key="victim_seed")
        _, accuracy = train_victim_from_spec(spec)
        click.echo(f"victim accuracy: {accuracy:.4f}")
        click.echo(f"checkpoint: {spec.victim_checkpoint}")
    _guarded(body)


@main.command("train-np")
@_common_options
def train_np_cmd(config, seed, out_dir):
    """Pre-train the image model and write its ANP1 checkpoint."""
    def body():
        spec = _load_spec(config, seed, out_dir, seed_key="np_seed")
        _, log, recon_err = train_np_from_spec(spec)
        click.echo(f"final epoch loss: {log.epoch_means[-1]:.4f}")
        click.echo(f"reconstruction mse (sample): {recon_err:.6f}")
        click.echo(f"checkpoint: {spec.np_checkpoint}")
    _guarded(body)


@main.command("attack")
@_common_options
def attack_cmd(config, seed, out_dir):
    """Run one attack campaign and write per-image, metrics, and curve files."""
    def body():
        spec = _load_spec(config, seed, out_dir)
        out = run_experiment(spec)
        m = out.metrics
        click.echo(f"method={m.method} asr={m.asr:.4f} mean_l2={m.mean_l2:.4f} "
                   f"max_linf={m.max_linf:.4f} mean_queries={m.mean_queries:.1f} "
                   f"median_queries={m.median_queries:.1f} n={m.eval_size}")
        click.echo(f"outputs in {out.out_dir}")
    _guarded(body)


@main.command("compare")
@_common_options
def compare_cmd(config, seed, out_dir):
    """Run the configured attack list on a shared evaluation set."""
    def body():
        spec = _load_spec(config, seed, out_dir)
        if not spec.attacks or len(spec.attacks) < 2:
            raise ConfigError("compare needs an 'attacks' list with >= 2 methods")
        outputs = compare([spec.replaced(attack=method) for method in spec.attacks])
        for out in outputs:
            m = out.metrics
            click.echo(f"{m.method}: asr={m.asr:.4f} mean_l2={m.mean_l2:.4f} "
                       f"mean_queries={m.mean_queries:.1f}")
        click.echo(f"outputs in {spec.out_dir}")
    _guarded(body)


@main.command("recon-gap")
@_common_options
def recon_gap_cmd(config, seed, out_dir):
    """Compare reconstruction error on adversarial vs noised inputs."""
    def body():
        spec = _load_spec(config, seed, out_dir, seed_key="recon_seed")
        adv_mse, noise_mse = reconstruction_gap_from_spec(spec)
        click.echo(f"adversarial mse: {adv_mse:.6f}")
        click.echo(f"noised mse: {noise_mse:.6f}")
        click.echo("adversarial inputs reconstruct better"
                   if adv_mse < noise_mse else
                   "noised inputs reconstruct better")
    _guarded(body)


if __name__ == "__main__":
    main()
