"""Simplified pixel-space black-box baselines sharing the oracle accounting.

Both are deliberately reduced: the distribution-based baseline searches a
Gaussian directly in pixel space with the same centered-NES rule as the
main attack; the coordinate baseline estimates per-pixel derivatives by
symmetric finite differences and takes projected descent steps. Neither
claims fidelity to the full published systems it is shorthand for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import (AttackResult, center_losses, margin_loss_batch, project)
from .errors import ContractViolation


@dataclass
class PixelNesConfig:
    epsilon_inf: float = 0.2
    max_iterations: int = 500
    sample_size: int = 30
    learning_rate: float = 0.02
    sigma_pix: float | None = None  # None: 0.1 of the epsilon budget
    targeted: bool = False
    target_label: int | None = None
    seed: int = 0
    query_budget: int | None = None

    def __post_init__(self):
        if self.epsilon_inf <= 0 or self.sample_size < 1 or self.max_iterations < 1:
            raise ContractViolation("need epsilon > 0, sample_size >= 1, iterations >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation("learning rate must be positive")
        if self.sigma_pix is not None and self.sigma_pix <= 0:
            raise ContractViolation("sigma_pix must be positive")
        if self.targeted and self.target_label is None:
            raise ContractViolation("targeted attack needs a target label")


def _distortions(candidate, x):
    diff = candidate - x
    return float(np.sqrt((diff * diff).sum())), float(np.abs(diff).max())


def pixel_nes_attack(oracle, x, y, cfg):
    """NES over a pixel-space search distribution (mean image, fixed std).

    Candidates are project(m + sigma_pix * p_i, x, eps); the mean moves by
    the same centered rule as the main attack. Query accounting matches it
    exactly: b queries per completed iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size != oracle.n_features:
        raise ContractViolation("oracle input width does not match the image")
    rng = np.random.default_rng(cfg.seed)
    sigma = cfg.sigma_pix if cfg.sigma_pix is not None else 0.1 * cfg.epsilon_inf
    b = cfg.sample_size
    loss_label = cfg.target_label if cfg.targeted else y

    mean = x.copy()
    best_loss = np.inf
    best_image = x.copy()
    trace = []
    queries = 0
    iterations = 0
    for _ in range(cfg.max_iterations):
        if cfg.query_budget is not None and queries + b > cfg.query_budget:
            break
        p = rng.standard_normal((b, *x.shape))
        candidates = project(mean[None, ...] + sigma * p,
                             np.broadcast_to(x, (b, *x.shape)), cfg.epsilon_inf)
        probs = oracle.query_many(candidates)
        queries += b
        iterations += 1
        losses = margin_loss_batch(probs, loss_label, cfg.targeted)
        labels = probs.argmax(axis=1)
        hits = (labels == cfg.target_label) if cfg.targeted else (labels != y)

        batch_best = int(losses.argmin())
        trace.append((float(losses[batch_best]), int(labels[batch_best])))
        if losses[batch_best] < best_loss:
            best_loss = float(losses[batch_best])
            best_image = candidates[batch_best].copy()

        if hits.any():
            winners = np.flatnonzero(hits)
            l2s = [_distortions(candidates[i], x)[0] for i in winners]
            winner = winners[int(np.argmin(l2s))]
            adv = candidates[winner].copy()
            l2, linf = _distortions(adv, x)
            return AttackResult(True, adv, queries, l2, linf, iterations, trace)

        centered = center_losses(losses)
        mean = mean - (cfg.learning_rate / (b * sigma)) * np.tensordot(centered, p, axes=(0, 0))

    l2, linf = _distortions(best_image, x)
    return AttackResult(False, best_image, queries, l2, linf, iterations, trace)


def fd_margin_gradient(oracle, w, coords, step, x, epsilon_inf, label,
                       targeted=False):
    """Symmetric finite-difference margin-loss derivatives along flat coords.

    Probes are projected before querying, so all of them respect the ball
    and box. Returns (gradient estimates, probe losses, probe labels);
    costs exactly 2 * len(coords) queries.
    """
    coords = np.asarray(coords, dtype=np.int64)
    flat = w.ravel()
    probes = np.repeat(flat[None, :], 2 * coords.shape[0], axis=0)
    for j, c in enumerate(coords):
        probes[2 * j, c] += step
        probes[2 * j + 1, c] -= step
    probes = project(probes.reshape(-1, *x.shape),
                     np.broadcast_to(x, (2 * coords.shape[0], *x.shape)), epsilon_inf)
    probs = oracle.query_many(probes)
    losses = margin_loss_batch(probs, label, targeted)
    grads = (losses[0::2] - losses[1::2]) / (2.0 * step)
    return grads, losses, probs.argmax(axis=1)


def coordinate_fd_attack(oracle, x, y, budget, step, epsilon_inf, lr=0.5,
                         block_size=16, seed=0, targeted=False, target_label=None):
    """Zeroth-order coordinate descent on the margin loss.

    Each iteration probes a random coordinate block (2 queries per
    coordinate), then evaluates one projected descent candidate. Greedy:
    the candidate is kept only if it does not increase the loss. Runs until
    success, budget exhaustion, or loss zero on any queried image.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    if targeted and target_label is None:
        raise ContractViolation("targeted attack needs a target label")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = x.size
    block = min(block_size, n)
    loss_label = target_label if targeted else y

    w = x.copy()
    probs = oracle.query(w)
    queries = 1
    current = margin_loss_batch(probs[None, :], loss_label, targeted)[0]
    label = int(probs.argmax())
    trace = [(float(current), label)]
    if (label == target_label) if targeted else (label != y):
        return AttackResult(True, w, queries, 0.0, 0.0, 0, trace)

    best_loss = current
    best_image = w.copy()
    iterations = 0
    while budget - queries >= 2 * block + 1:
        coords = rng.choice(n, size=block, replace=False)
        grads, probe_losses, probe_labels = fd_margin_gradient(
            oracle, w, coords, step, x, epsilon_inf, loss_label, targeted)
        queries += 2 * block
        hits = (probe_labels == target_label) if targeted else (probe_labels != y)
        if hits.any():
            j = int(np.flatnonzero(hits)[0])
            adv = w.ravel().copy()
            adv[coords[j // 2]] += step if j % 2 == 0 else -step
            adv = project(adv.reshape(x.shape), x, epsilon_inf)
            iterations += 1
            l2, linf = _distortions(adv, x)
            trace.append((0.0, int(probe_labels[j])))
            return AttackResult(True, adv, queries, l2, linf, iterations, trace)

        flat = w.ravel().copy()
        flat[coords] -= lr * grads
        candidate = project(flat.reshape(x.shape), x, epsilon_inf)
        cand_probs = oracle.query(candidate)
        queries += 1
        iterations += 1
        cand_loss = margin_loss_batch(cand_probs[None, :], loss_label, targeted)[0]
        cand_label = int(cand_probs.argmax())
        trace.append((float(cand_loss), cand_label))
        if (cand_label == target_label) if targeted else (cand_label != y):
            l2, linf = _distortions(candidate, x)
            return AttackResult(True, candidate, queries, l2, linf, iterations, trace)
        if cand_loss <= current:
            w = candidate
            current = cand_loss
        if cand_loss < best_loss:
            best_loss = cand_loss
            best_image = candidate.copy()

    l2, linf = _distortions(best_image, x)
    return AttackResult(False, best_image, queries, l2, linf, iterations, trace)
