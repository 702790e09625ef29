"""Black-box attack that optimizes a pre-trained neural process with NES.

The benign image is encoded once into a global latent Gaussian (mu, sigma)
and a per-pixel deterministic representation r. Each iteration samples b
perturbed candidates, decodes and projects them into the distortion ball,
queries the oracle on all of them, and moves the chosen variables against
the mean-centered margin losses. sigma stays frozen throughout. Query
accounting is exact: every completed iteration costs exactly b queries and
nothing else touches the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anp import decode_batch, encode, image_to_context
from .errors import ContractViolation

VARIANTS = ("R", "Z", "RZ")


@dataclass
class AttackConfig:
    """Knobs for one attack run; defaults follow the untargeted protocol."""

    variant: str = "R"
    epsilon_inf: float = 0.2
    max_iterations: int = 900
    sample_size: int = 30
    learning_rate: float = 0.01
    sigma_prime: float | None = None  # None: perturb with the encoder sigma
    targeted: bool = False
    target_label: int | None = None
    seed: int = 0
    query_budget: int | None = None
    deterministic_z: bool = False  # variant R: decode with z = mu instead of sampling
    antithetic: bool = False  # paired +/- perturbations (variance reduction)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}")
        if self.epsilon_inf <= 0 or self.sample_size < 1 or self.max_iterations < 1:
            raise ContractViolation("need epsilon > 0, sample_size >= 1, iterations >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation("learning rate must be positive")
        if self.targeted and self.target_label is None:
            raise ContractViolation("targeted attack needs a target label")


@dataclass
class AttackResult:
    """Outcome of one attack: the reporting unit for all campaign tables."""

    success: bool
    adversarial_image: np.ndarray
    queries_used: int
    l2_distortion: float
    linf_distortion: float
    iterations_run: int
    trace: list = field(default_factory=list)  # per iteration: (best loss, best label)


def _margin_from_logp(logp, label, targeted):
    others = np.delete(logp, label)
    if targeted:
        return max(0.0, float(others.max() - logp[label]))
    return max(0.0, float(logp[label] - others.max()))


def margin_loss(probs, label, targeted=False):
    """Hinge on the log-score gap between the labeled class and its best rival.

    Untargeted: max(0, log p_y - max_{c != y} log p_c); targeted swaps the
    two terms with y the target label. Zero exactly when the attack goal
    holds (up to exact score ties).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if label < 0 or label >= probs.shape[-1]:
        raise ContractViolation(f"label {label} out of range for {probs.shape[-1]} classes")
    logp = np.log(np.maximum(probs, 1e-300))
    return _margin_from_logp(logp, label, targeted)


def margin_loss_batch(probs, label, targeted=False):
    probs = np.asarray(probs, dtype=np.float64)
    if label < 0 or label >= probs.shape[1]:
        raise ContractViolation(f"label {label} out of range for {probs.shape[1]} classes")
    logp = np.log(np.maximum(probs, 1e-300))
    own = logp[:, label].copy()
    masked = logp.copy()
    masked[:, label] = -np.inf
    best_other = masked.max(axis=1)
    gap = own - best_other if not targeted else best_other - own
    return np.maximum(0.0, gap)


def project(x_rec, x, epsilon_inf):
    """Clamp a candidate into the epsilon ball around x intersected with [0,1]."""
    x_rec = np.asarray(x_rec, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_rec.shape != x.shape:
        raise ContractViolation("project: shape mismatch")
    lower = np.maximum(x - epsilon_inf, 0.0)
    upper = np.minimum(x + epsilon_inf, 1.0)
    return np.clip(x_rec, lower, upper)


def _draw(rng, shape, antithetic):
    if not antithetic or shape[0] < 2:
        return rng.standard_normal(shape)
    half = (shape[0] + 1) // 2
    p = rng.standard_normal((half, *shape[1:]))
    return np.concatenate([p, -p], axis=0)[: shape[0]]


def sample_batch(mu, sigma, r, variant, b, rng, sigma_prime=None,
                 deterministic_z=False, antithetic=False):
    """Draw b perturbed (z_i, r_i) candidates plus the perturbations used.

    Per variant: R leaves the latent mean alone (z_i freshly sampled from
    the encoded Gaussian, or fixed at mu) and shifts r by p_i * sigma with
    p_i per pixel row; Z shifts the latent sample to mu + 2 p_i sigma with
    a shared p_i reused as both the mean shift and the draw; RZ applies the
    Z shift and replicates the same p_i row across all of r. The scale is
    the encoder sigma broadcast over rows unless a fixed scalar is given.
    With ``antithetic`` the perturbations come in +/- pairs (still standard
    normal marginally), halving the estimator variance.
    """
    if b < 1:
        raise ContractViolation("sample_size must be >= 1")
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if (sigma <= 0).any():
        raise ContractViolation("sigma must be strictly positive")
    r = np.asarray(r, dtype=np.float64)
    d = mu.shape[0]
    n = r.shape[0]
    scale = np.full(d, float(sigma_prime)) if sigma_prime is not None else sigma

    if variant == "R":
        p = _draw(rng, (b, n, d), antithetic)
        r_batch = r[None, :, :] + p * scale[None, None, :]
        if deterministic_z:
            z_batch = np.repeat(mu[None, :], b, axis=0)
        else:
            z_batch = mu[None, :] + rng.standard_normal((b, d)) * sigma[None, :]
    elif variant == "Z":
        p = _draw(rng, (b, d), antithetic)
        z_batch = mu[None, :] + 2.0 * p * scale[None, :]
        r_batch = np.repeat(r[None, :, :], b, axis=0)
    elif variant == "RZ":
        p = _draw(rng, (b, d), antithetic)
        z_batch = mu[None, :] + 2.0 * p * scale[None, :]
        r_batch = r[None, :, :] + (p * scale[None, :])[:, None, :]
    else:
        raise ContractViolation(f"unknown variant {variant!r}")
    return z_batch, r_batch, p, scale


def center_losses(losses):
    losses = np.asarray(losses, dtype=np.float64)
    return losses - losses.mean()


def nes_update(variable, losses, perturbations, eta, b, sigma):
    """One evolution-strategies step: v - (eta / (b sigma)) sum_i l_i p_i.

    Losses must already be mean-centered; sigma is broadcast exactly as in
    sample_batch (over pixel rows for r-shaped variables).
    """
    variable = np.asarray(variable, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    perturbations = np.asarray(perturbations, dtype=np.float64)
    if perturbations.shape != (losses.shape[0], *variable.shape):
        raise ContractViolation("perturbation shapes must match the variable")
    weighted = np.tensordot(losses, perturbations, axes=(0, 0))
    return variable - (eta / b) * weighted / np.broadcast_to(sigma, variable.shape)


def _distortions(candidate, x):
    diff = candidate - x
    return float(np.sqrt((diff * diff).sum())), float(np.abs(diff).max())


def run_attack(oracle, np_params, x, y, cfg):
    """Full attack loop against a query oracle.

    Encodes x with its complete pixel set, then iterates: sample b
    candidates, decode, project, query, early-stop on any candidate that
    meets the goal (lowest-L2 winner among ties), otherwise take a centered
    NES step on the variant's variables. Stops at success, the iteration
    cap, or when the next full batch would exceed the query budget, in
    which case the best candidate so far is returned with success=False.
    """
    x = np.asarray(x, dtype=np.float64)
    expected = (np_params.image_h, np_params.image_w, np_params.image_c)
    if x.shape != expected:
        raise ContractViolation(f"image shape {x.shape} does not match model {expected}")
    if x.size != oracle.n_features:
        raise ContractViolation("oracle input width does not match the image")
    if cfg.targeted and not (0 <= cfg.target_label < oracle.n_classes):
        raise ContractViolation("target label out of range")
    if not cfg.targeted and not (0 <= y < oracle.n_classes):
        raise ContractViolation("label out of range")

    rng = np.random.default_rng(cfg.seed)
    ctx = image_to_context(x)
    latent, det = encode(np_params, ctx, ctx.positions)
    mu = latent.mu.copy()
    sigma = latent.sigma  # frozen for the whole attack
    r = det.r.copy()
    b = cfg.sample_size
    loss_label = cfg.target_label if cfg.targeted else y

    best_loss = np.inf
    best_image = x.copy()
    trace = []
    queries = 0
    iterations = 0

    for _ in range(cfg.max_iterations):
        if cfg.query_budget is not None and queries + b > cfg.query_budget:
            break
        z_batch, r_batch, p, scale = sample_batch(
            mu, sigma, r, cfg.variant, b, rng,
            sigma_prime=cfg.sigma_prime, deterministic_z=cfg.deterministic_z)
        decoded = decode_batch(np_params, z_batch, r_batch, ctx.positions)
        candidates = project(decoded.reshape((b, *x.shape)),
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
        if cfg.variant in ("R", "RZ"):
            r_pert = p if cfg.variant == "R" else np.broadcast_to(
                p[:, None, :], (b, r.shape[0], r.shape[1]))
            r = nes_update(r, centered, r_pert, cfg.learning_rate, b, scale[None, :])
        if cfg.variant in ("Z", "RZ"):
            mu = nes_update(mu, centered, p, cfg.learning_rate, b, scale)

    l2, linf = _distortions(best_image, x)
    return AttackResult(False, best_image, queries, l2, linf, iterations, trace)


def success_curve(results, budgets):
    """Fraction of attacks that succeeded within each query budget."""
    results = list(results)
    if not results:
        raise ContractViolation("success_curve needs at least one result")
    budgets = np.asarray(budgets)
    fractions = np.empty(budgets.shape[0], dtype=np.float64)
    for i, budget in enumerate(budgets):
        hits = sum(1 for res in results if res.success and res.queries_used <= budget)
        fractions[i] = hits / len(results)
    return fractions
