"""Experiment orchestration: configs, campaigns, metrics, and reports.

A single key-value config file fully determines a run; identical configs
(and seeds) reproduce every output file byte for byte. The victim and the
image model are always consumed from checkpoints so that attack campaigns
never depend on training-time state.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields

import numpy as np

from .anp import reconstruct, train_np, AnpParameters
from .attack import AttackConfig, run_attack, success_curve
from .baselines import PixelNesConfig, coordinate_fd_attack, pixel_nes_attack
from .checkpoint import (load_anp, load_classifier, save_anp, save_classifier)
from .data import LabeledDataset, downscale, load_idx, synth_dataset
from .errors import ConfigError, ContractViolation
from .svgplot import line_chart
from .victim import QueryOracle, fgsm_attack, train_classifier

ATTACK_METHODS = ("np-r", "np-z", "np-rz", "pixel-nes", "coord-fd")


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text):
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_budgets(text):
    if ":" in text:
        lo, hi, step = (int(p) for p in text.split(":"))
        return list(range(lo, hi + 1, step))
    return _parse_int_list(text)


def _opt(cast):
    return lambda text: None if text.strip() == "" else cast(text)


CONFIG_SCHEMA = {
    # dataset
    "dataset": (str, "synthetic"),
    "classes": (int, 10),
    "image_size": (int, 14),
    "train_samples": (int, 800),
    "test_samples": (int, 400),
    "data_seed": (int, 7),
    "idx_train_images": (_opt(str), None),
    "idx_train_labels": (_opt(str), None),
    "idx_test_images": (_opt(str), None),
    "idx_test_labels": (_opt(str), None),
    # victim
    "victim_checkpoint": (_opt(str), None),
    "victim_arch": (_opt(_parse_int_list), None),
    "victim_epochs": (int, 15),
    "victim_lr": (float, 1e-3),
    "victim_seed": (int, 1),
    # image model
    "np_checkpoint": (_opt(str), None),
    "np_epochs": (int, 8),
    "np_batch": (int, 16),
    "np_lr": (float, 1e-4),
    "np_train_images": (int, 160),
    "np_context_min": (float, 0.5),
    "np_context_max": (float, 1.0),
    "np_seed": (int, 2),
    # attack
    "attack": (str, "np-r"),
    "attacks": (_opt(lambda t: [p.strip() for p in t.split(",") if p.strip()]), None),
    "epsilon": (float, 0.2),
    "iterations": (int, 900),
    "sample_size": (int, 30),
    "learning_rate": (float, 0.01),
    "sigma_prime": (_opt(float), None),
    "deterministic_z": (_parse_bool, False),
    "targeted": (_parse_bool, False),
    "query_budget": (_opt(int), None),
    "sigma_pix": (_opt(float), None),
    "fd_step": (float, 0.01),
    "fd_lr": (float, 0.5),
    "fd_block": (int, 16),
    # evaluation
    "eval_size": (int, 200),
    "eval_seed": (int, 3),
    "seed": (int, 0),
    "budgets": (_parse_budgets, list(range(500, 15001, 500))),
    "assert_projection": (_parse_bool, False),
    "write_svg": (_parse_bool, True),
    "out_dir": (str, "out"),
    # reconstruction study
    "recon_count": (int, 40),
    "recon_epsilon": (float, 0.2),
    "recon_attack": (str, "pgd"),
    "recon_steps": (int, 10),
    "recon_seed": (int, 5),
}


@dataclass
class ExperimentSpec:
    """Typed view of one experiment config."""

    dataset: str
    classes: int
    image_size: int
    train_samples: int
    test_samples: int
    data_seed: int
    idx_train_images: str | None
    idx_train_labels: str | None
    idx_test_images: str | None
    idx_test_labels: str | None
    victim_checkpoint: str | None
    victim_arch: list | None
    victim_epochs: int
    victim_lr: float
    victim_seed: int
    np_checkpoint: str | None
    np_epochs: int
    np_batch: int
    np_lr: float
    np_train_images: int
    np_context_min: float
    np_context_max: float
    np_seed: int
    attack: str
    attacks: list | None
    epsilon: float
    iterations: int
    sample_size: int
    learning_rate: float
    sigma_prime: float | None
    deterministic_z: bool
    targeted: bool
    query_budget: int | None
    sigma_pix: float | None
    fd_step: float
    fd_lr: float
    fd_block: int
    eval_size: int
    eval_seed: int
    seed: int
    budgets: list
    assert_projection: bool
    write_svg: bool
    out_dir: str
    recon_count: int
    recon_epsilon: float
    recon_attack: str
    recon_steps: int
    recon_seed: int

    @classmethod
    def defaults(cls, **overrides):
        values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        values.update(overrides)
        return cls(**values)

    def replaced(self, **overrides):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(overrides)
        return ExperimentSpec(**values)


def parse_config(path, overrides=None):
    """Parse a key = value config file; unknown keys are rejected outright."""
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        cast, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = cast(value.strip())
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    if overrides:
        values.update(overrides)
    spec = ExperimentSpec(**values)
    if spec.eval_size < 1:
        raise ConfigError("eval_size must be >= 1")
    return spec


def load_dataset(spec):
    """Materialize the (train, test) pair named by the spec."""
    if spec.dataset == "synthetic":
        train = synth_dataset(spec.classes, spec.image_size, spec.train_samples,
                              spec.data_seed)
        test = synth_dataset(spec.classes, spec.image_size, spec.test_samples,
                             spec.data_seed + 1)
        return train, test
    if spec.dataset == "idx":
        for key in ("idx_train_images", "idx_train_labels",
                    "idx_test_images", "idx_test_labels"):
            value = getattr(spec, key)
            if value is None:
                raise ConfigError(f"dataset=idx requires {key}")
            if not os.path.exists(value):
                raise ConfigError(f"{key} path does not exist: {value}")
        train = load_idx(spec.idx_train_images, spec.idx_train_labels)
        test = load_idx(spec.idx_test_images, spec.idx_test_labels)
        if spec.image_size and spec.image_size != train.images.shape[1]:
            train = downscale(train, spec.image_size)
            test = downscale(test, spec.image_size)
        return train, test
    raise ConfigError(f"unknown dataset kind {spec.dataset!r}")


@dataclass
class MetricsRow:
    """One campaign summary line, Table-style: rates over all runs, distortion
    and query statistics over the successful ones."""

    method: str
    asr: float
    mean_l2: float
    max_linf: float
    mean_queries: float
    median_queries: float
    eval_size: int
    seed: int


PER_IMAGE_HEADER = ["image_index", "label", "target_label", "success",
                    "queries", "l2", "linf", "iterations"]
METRICS_HEADER = ["method", "asr", "mean_l2", "max_linf", "mean_queries",
                  "median_queries", "eval_size", "seed"]


def aggregate(method, records, seed):
    """Fold per-attack records into a MetricsRow; pure and re-runnable."""
    total = len(records)
    if total == 0:
        raise ContractViolation("cannot aggregate an empty campaign")
    wins = [rec for rec in records if rec["success"]]
    asr = len(wins) / total
    if wins:
        mean_l2 = float(np.mean([rec["l2"] for rec in wins]))
        max_linf = float(np.max([rec["linf"] for rec in wins]))
        mean_q = float(np.mean([rec["queries"] for rec in wins]))
        median_q = float(np.median([rec["queries"] for rec in wins]))
    else:
        mean_l2 = max_linf = mean_q = median_q = float("nan")
    return MetricsRow(method, asr, mean_l2, max_linf, mean_q, median_q, total, seed)


def _result_record(image_index, label, target_label, result):
    return {
        "image_index": int(image_index),
        "label": int(label),
        "target_label": int(target_label),
        "success": bool(result.success),
        "queries": int(result.queries_used),
        "l2": float(result.l2_distortion),
        "linf": float(result.linf_distortion),
        "iterations": int(result.iterations_run),
    }


def write_per_image_csv(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PER_IMAGE_HEADER)
        for rec in records:
            writer.writerow([rec["image_index"], rec["label"], rec["target_label"],
                             int(rec["success"]), rec["queries"], repr(rec["l2"]),
                             repr(rec["linf"]), rec["iterations"]])


def read_per_image_csv(path):
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append({
                "image_index": int(row["image_index"]),
                "label": int(row["label"]),
                "target_label": int(row["target_label"]),
                "success": bool(int(row["success"])),
                "queries": int(row["queries"]),
                "l2": float(row["l2"]),
                "linf": float(row["linf"]),
                "iterations": int(row["iterations"]),
            })
    return records


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row.method, repr(row.asr), repr(row.mean_l2),
                             repr(row.max_linf), repr(row.mean_queries),
                             repr(row.median_queries), row.eval_size, row.seed])


def write_curve_csv(path, budgets, columns):
    """columns: ordered {method: fractions} aligned with budgets."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["budget", *columns.keys()])
        for i, budget in enumerate(budgets):
            writer.writerow([budget, *(repr(float(columns[m][i])) for m in columns)])


def select_evaluation_images(classifier, test, eval_size, eval_seed):
    """Seeded sample (without replacement, kept in dataset order) of
    correctly classified test images."""
    predicted = classifier.predict(test.images.reshape(len(test), -1))
    correct = np.flatnonzero(predicted == test.labels)
    if correct.size == 0:
        raise ContractViolation("no correctly classified images to attack")
    if correct.size < eval_size:
        raise ContractViolation(
            f"only {correct.size} correctly classified images, need {eval_size}")
    rng = np.random.default_rng(eval_seed)
    picked = rng.choice(correct, size=eval_size, replace=False)
    return np.sort(picked)


def _attack_once(method, spec, oracle, np_params, image, label, target_label, seed):
    if method in ("np-r", "np-z", "np-rz"):
        cfg = AttackConfig(
            variant=method.split("-")[1].upper(),
            epsilon_inf=spec.epsilon,
            max_iterations=spec.iterations,
            sample_size=spec.sample_size,
            learning_rate=spec.learning_rate,
            sigma_prime=spec.sigma_prime,
            targeted=spec.targeted,
            target_label=target_label if spec.targeted else None,
            seed=seed,
            query_budget=spec.query_budget,
            deterministic_z=spec.deterministic_z,
        )
        return run_attack(oracle, np_params, image, label, cfg)
    if method == "pixel-nes":
        cfg = PixelNesConfig(
            epsilon_inf=spec.epsilon,
            max_iterations=spec.iterations,
            sample_size=spec.sample_size,
            learning_rate=spec.learning_rate,
            sigma_pix=spec.sigma_pix,
            targeted=spec.targeted,
            target_label=target_label if spec.targeted else None,
            seed=seed,
            query_budget=spec.query_budget,
        )
        return pixel_nes_attack(oracle, image, label, cfg)
    if method == "coord-fd":
        budget = spec.query_budget or spec.iterations * spec.sample_size
        return coordinate_fd_attack(
            oracle, image, label, budget, spec.fd_step, spec.epsilon,
            lr=spec.fd_lr, block_size=spec.fd_block, seed=seed,
            targeted=spec.targeted,
            target_label=target_label if spec.targeted else None)
    raise ConfigError(f"unknown attack method {method!r}")


@dataclass
class ExperimentOutput:
    metrics: MetricsRow
    records: list
    results: list
    budgets: list
    curve: np.ndarray
    out_dir: str


def run_experiment(spec):
    """Run one attack campaign end to end and write its report files.

    Filters the test set to correctly classified images, samples the
    evaluation set with the eval seed, attacks each image (per target label
    when targeted), and emits the per-image CSV, the aggregated metrics
    row, and the success-curve CSV (plus an optional SVG).
    """
    if spec.attack not in ATTACK_METHODS:
        raise ConfigError(f"attack must be one of {ATTACK_METHODS}")
    train, test = load_dataset(spec)
    if spec.victim_checkpoint is None:
        raise ConfigError("attack campaigns need victim_checkpoint")
    classifier = load_classifier(spec.victim_checkpoint)
    h, w, c = test.images.shape[1:]
    if classifier.n_features != h * w * c:
        raise ContractViolation(
            f"victim expects {classifier.n_features} features but images have {h * w * c}")
    np_params = None
    if spec.attack.startswith("np-"):
        if spec.np_checkpoint is None:
            raise ConfigError("neural-process attacks need np_checkpoint")
        np_params = load_anp(spec.np_checkpoint)
        if (np_params.image_h, np_params.image_w, np_params.image_c) != (h, w, c):
            raise ContractViolation(
                f"model checkpoint is for {np_params.image_h}x{np_params.image_w}"
                f"x{np_params.image_c} images, dataset has {h}x{w}x{c}")

    picked = select_evaluation_images(classifier, test, spec.eval_size, spec.eval_seed)
    records = []
    results = []
    run_index = 0
    for idx in picked:
        image = test.images[idx]
        label = int(test.labels[idx])
        if spec.targeted:
            targets = [t for t in range(classifier.n_classes) if t != label]
        else:
            targets = [-1]
        for target in targets:
            oracle = QueryOracle(classifier)
            if spec.assert_projection:
                oracle.enable_ball_guard(image, spec.epsilon)
            result = _attack_once(spec.attack, spec, oracle, np_params, image,
                                  label, target, spec.seed + run_index)
            if result.queries_used != oracle.query_count:
                raise ContractViolation("attack mis-reported its query count")
            records.append(_result_record(idx, label, target, result))
            results.append(result)
            run_index += 1

    metrics = aggregate(spec.attack, records, spec.seed)
    budgets = list(spec.budgets)
    curve = success_curve(results, budgets)

    os.makedirs(spec.out_dir, exist_ok=True)
    write_per_image_csv(os.path.join(spec.out_dir, "per_image.csv"), records)
    write_metrics_csv(os.path.join(spec.out_dir, "metrics.csv"), [metrics])
    write_curve_csv(os.path.join(spec.out_dir, "curve.csv"), budgets,
                    {spec.attack: curve})
    if spec.write_svg:
        line_chart(os.path.join(spec.out_dir, "curve.svg"),
                   [(spec.attack, budgets, curve)],
                   title="Success rate vs query budget",
                   xlabel="query budget", ylabel="success fraction")
    return ExperimentOutput(metrics, records, results, budgets, curve, spec.out_dir)


SHARED_COMPARE_FIELDS = (
    "dataset", "classes", "image_size", "train_samples", "test_samples",
    "data_seed", "idx_test_images", "idx_test_labels", "victim_checkpoint",
    "epsilon", "eval_size", "eval_seed", "seed", "targeted",
)


def compare(specs):
    """Run several campaigns that share victim/dataset/eval set and overlay them.

    Refuses to compare specs whose shared fields differ, naming the fields.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise ContractViolation("compare needs at least two specs")
    base = specs[0]
    for other in specs[1:]:
        diffs = [name for name in SHARED_COMPARE_FIELDS
                 if getattr(base, name) != getattr(other, name)]
        if diffs:
            raise ContractViolation(
                "compare requires shared evaluation fields; differing: "
                + ", ".join(f"{name} ({getattr(base, name)!r} vs {getattr(other, name)!r})"
                            for name in diffs))

    outputs = []
    for spec in specs:
        sub = spec.replaced(out_dir=os.path.join(base.out_dir, spec.attack))
        outputs.append(run_experiment(sub))

    os.makedirs(base.out_dir, exist_ok=True)
    rows = [out.metrics for out in outputs]
    write_metrics_csv(os.path.join(base.out_dir, "compare_metrics.csv"), rows)
    budgets = outputs[0].budgets
    columns = {out.metrics.method: out.curve for out in outputs}
    write_curve_csv(os.path.join(base.out_dir, "compare_curve.csv"), budgets, columns)
    if base.write_svg:
        line_chart(os.path.join(base.out_dir, "compare_curve.svg"),
                   [(m, budgets, columns[m]) for m in columns],
                   title="Success rate vs query budget",
                   xlabel="query budget", ylabel="success fraction")
    return outputs


def reconstruction_gap(np_params, classifier, dataset, epsilon, attack="pgd",
                       steps=10, seed=0):
    """Mean reconstruction MSE of adversarial vs uniformly noised inputs.

    Adversarial inputs come from the white-box gradient-sign attack at the
    given distortion; noised inputs add uniform noise of the same maximal
    magnitude. Returns (adversarial mse, noised mse, per-image rows).
    """
    if attack not in ("pgd", "fgsm"):
        raise ContractViolation("recon attack must be pgd or fgsm")
    rng = np.random.default_rng(seed)
    n_steps = steps if attack == "pgd" else 1
    rows = []
    adv_mses = []
    noise_mses = []
    for i in range(len(dataset)):
        image = dataset.images[i]
        label = int(dataset.labels[i])
        adv = fgsm_attack(classifier, image, label, epsilon, steps=n_steps)
        noised = np.clip(image + rng.uniform(-epsilon, epsilon, size=image.shape),
                         0.0, 1.0)
        adv_mse = float(np.mean((reconstruct(np_params, adv) - adv) ** 2))
        noise_mse = float(np.mean((reconstruct(np_params, noised) - noised) ** 2))
        adv_mses.append(adv_mse)
        noise_mses.append(noise_mse)
        rows.append({"index": i, "label": label, "adv_mse": adv_mse,
                     "noise_mse": noise_mse})
    return float(np.mean(adv_mses)), float(np.mean(noise_mses)), rows


def write_recon_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label", "adv_mse", "noise_mse"])
        for row in rows:
            writer.writerow([row["index"], row["label"], repr(row["adv_mse"]),
                             repr(row["noise_mse"])])


def train_victim_from_spec(spec):
    """train-target entry: fit the victim and write its checkpoint."""
    if spec.victim_checkpoint is None:
        raise ConfigError("train-target needs victim_checkpoint (output path)")
    train, test = load_dataset(spec)
    clf, accuracy = train_classifier(train, arch=spec.victim_arch,
                                     epochs=spec.victim_epochs, test=test,
                                     lr=spec.victim_lr, seed=spec.victim_seed)
    parent = os.path.dirname(spec.victim_checkpoint)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_classifier(spec.victim_checkpoint, clf)
    return clf, accuracy


def train_np_from_spec(spec):
    """train-np entry: pre-train the image model and write its checkpoint."""
    if spec.np_checkpoint is None:
        raise ConfigError("train-np needs np_checkpoint (output path)")
    train, _ = load_dataset(spec)
    h, w, c = train.images.shape[1:]
    images = train.images[:spec.np_train_images]
    params = AnpParameters.init(h, w, c, seed=spec.np_seed)
    log = train_np(params, images, epochs=spec.np_epochs, batch=spec.np_batch,
                   context_fraction_range=(spec.np_context_min, spec.np_context_max),
                   lr=spec.np_lr, seed=spec.np_seed)
    parent = os.path.dirname(spec.np_checkpoint)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_anp(spec.np_checkpoint, params)
    recon_err = float(np.mean([
        np.mean((reconstruct(params, img) - img) ** 2) for img in images[:20]]))
    return params, log, recon_err


def reconstruction_gap_from_spec(spec):
    """recon-gap entry: select images, run the study, write its CSV."""
    if spec.victim_checkpoint is None or spec.np_checkpoint is None:
        raise ConfigError("recon-gap needs victim_checkpoint and np_checkpoint")
    _, test = load_dataset(spec)
    classifier = load_classifier(spec.victim_checkpoint)
    np_params = load_anp(spec.np_checkpoint)
    picked = select_evaluation_images(classifier, test, spec.recon_count,
                                      spec.eval_seed)
    subset = test.subset(picked)
    adv_mse, noise_mse, rows = reconstruction_gap(
        np_params, classifier, subset, spec.recon_epsilon,
        attack=spec.recon_attack, steps=spec.recon_steps, seed=spec.recon_seed)
    os.makedirs(spec.out_dir, exist_ok=True)
    write_recon_csv(os.path.join(spec.out_dir, "recon_gap.csv"), rows)
    return adv_mse, noise_mse


def check_nan_safe_equal(a, b):
    """Equality that treats NaN == NaN as true (metrics re-aggregation)."""
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return a == b
