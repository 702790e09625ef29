"""Attentive neural-process image model: encoder, decoder, training.

The model maps a set of (pixel position, pixel value) context pairs to a
predictive distribution over pixel values at target positions. Two encoder
paths feed a shared decoder: a deterministic path producing one 128-wide
representation row per target pixel via self- and cross-attention, and a
latent path producing a single global Gaussian (mu, sigma) per image via
a mean pool. The decoder consumes concat(r_row, z, position) and squashes
its output into [0,1] with a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, backward
from .errors import ContractViolation

LATENT_DIM = 128
DET_DIM = 128
POSITION_DIM = 3
PAIR_DIM = POSITION_DIM + 1
DECODER_IN = DET_DIM + LATENT_DIM + POSITION_DIM
SIGMA_FLOOR = 1e-4
OBS_SIGMA = 0.1


@dataclass
class PixelContext:
    """Paired pixel positions (N x 3, normalized row/col/channel) and values (N)."""

    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != POSITION_DIM:
            raise ContractViolation("positions must be N x 3")
        if self.values.shape != (self.positions.shape[0],):
            raise ContractViolation("values must align with positions")

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices)
        return PixelContext(self.positions[idx], self.values[idx])


@dataclass
class LatentGaussian:
    """Global per-image latent: mean and strictly positive scale, each 128-wide."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class DeterministicRep:
    """One 128-wide representation row per target pixel."""

    r: np.ndarray


def pixel_positions(h, w, c):
    """Row-major normalized (row, col, channel) coordinates for an H x W x C image."""
    rows, cols, chans = np.meshgrid(
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        np.arange(c, dtype=np.float64),
        indexing="ij",
    )
    return np.stack(
        [
            rows.ravel() / max(h - 1, 1),
            cols.ravel() / max(w - 1, 1),
            chans.ravel() / max(c - 1, 1),
        ],
        axis=1,
    )


def image_to_context(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractViolation("expected an H x W x C image")
    h, w, c = image.shape
    return PixelContext(pixel_positions(h, w, c), image.ravel())


def _param_shapes():
    shapes = {}
    for prefix in ("det", "lat"):
        shapes[f"{prefix}_w1"] = (PAIR_DIM, 128)
        shapes[f"{prefix}_b1"] = (128,)
        shapes[f"{prefix}_w2"] = (128, 128)
        shapes[f"{prefix}_b2"] = (128,)
        shapes[f"{prefix}_w3"] = (128, 128)
        shapes[f"{prefix}_b3"] = (128,)
    shapes["det_w4"] = (128, DET_DIM)
    shapes["det_b4"] = (DET_DIM,)
    shapes["lat_head_w"] = (128, 2 * LATENT_DIM)
    shapes["lat_head_b"] = (2 * LATENT_DIM,)
    shapes["dec_w1"] = (DECODER_IN, 128)
    shapes["dec_b1"] = (128,)
    shapes["dec_w2"] = (128, 128)
    shapes["dec_b2"] = (128,)
    shapes["dec_w3"] = (128, 128)
    shapes["dec_b3"] = (128,)
    shapes["dec_w4"] = (128, 1)
    shapes["dec_b4"] = (1,)
    return shapes


PARAM_SHAPES = _param_shapes()


@dataclass
class AnpParameters:
    """All trainable weights plus the image geometry they were trained for."""

    image_h: int
    image_w: int
    image_c: int
    tensors: dict = field(repr=False)
    d_z: int = LATENT_DIM
    d_r: int = DET_DIM
    version: str = "ANP1"

    @classmethod
    def init(cls, image_h, image_w, image_c, seed=0):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith(("b1", "b2", "b3", "b4", "head_b")):
                tensors[name] = Tensor(np.zeros(shape))
            else:
                # relu-friendly fan-in scaling
                std = np.sqrt(2.0 / shape[0])
                tensors[name] = Tensor(rng.normal(0.0, std, size=shape))
        # start the latent scale near 0.13 so early samples do not drown mu
        tensors["lat_head_b"].data[LATENT_DIM:] = -2.0
        return cls(image_h=image_h, image_w=image_w, image_c=image_c, tensors=tensors)

    def arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def validate_shapes(self):
        for name, shape in PARAM_SHAPES.items():
            got = self.tensors[name].data.shape
            if got != shape:
                raise ContractViolation(f"parameter {name} has shape {got}, expected {shape}")

    @property
    def n_pixels(self):
        return self.image_h * self.image_w * self.image_c


def _canonical_order(context):
    """Sort context pairs by position so encoding is order-independent bit for bit."""
    p = context.positions
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0]))
    return context.subset(order)


def _embed(params, prefix, pairs_t):
    t = params.tensors
    h = ad.relu(ad.affine(pairs_t, t[f"{prefix}_w1"], t[f"{prefix}_b1"]))
    h = ad.relu(ad.affine(h, t[f"{prefix}_w2"], t[f"{prefix}_b2"]))
    return ad.relu(ad.affine(h, t[f"{prefix}_w3"], t[f"{prefix}_b3"]))


def _embed_positions(params, prefix, pos_t):
    # positions ride through the pair embedding with a zeroed value slot
    zeros = Tensor(np.zeros((pos_t.shape[0], 1)))
    return _embed(params, prefix, ad.concat_cols([pos_t, zeros]))


def _deterministic_path(params, ctx_pairs_t, ctx_pos_t, tgt_pos_t):
    embedded = _embed(params, "det", ctx_pairs_t)
    attended = ad.scaled_dot_attention(embedded, embedded, embedded)
    # target positions query the context positions, both through the shared
    # embedding; values are the self-attended context rows
    queries = _embed_positions(params, "det", tgt_pos_t)
    keys = _embed_positions(params, "det", ctx_pos_t)
    crossed = ad.scaled_dot_attention(queries, keys, attended)
    return ad.affine(crossed, params.tensors["det_w4"], params.tensors["det_b4"])


def _latent_path(params, pairs_t):
    embedded = _embed(params, "lat", pairs_t)
    attended = ad.scaled_dot_attention(embedded, embedded, embedded)
    pooled = ad.mean_rows(attended)
    head = ad.affine(pooled, params.tensors["lat_head_w"], params.tensors["lat_head_b"])
    mu = ad.slice_cols(head, 0, LATENT_DIM)
    pre_sigma = ad.slice_cols(head, LATENT_DIM, 2 * LATENT_DIM)
    sigma = ad.add_scalar(ad.softplus(pre_sigma), SIGMA_FLOOR)
    return mu, sigma


def _pairs_tensor(context):
    return Tensor(np.concatenate([context.positions, context.values[:, None]], axis=1))


def _encode_t(params, context, target_positions):
    """Taped encode: returns (mu 1xd, sigma 1xd, r Nxd) as Tensors."""
    ctx = _canonical_order(context)
    ctx_pairs = _pairs_tensor(ctx)
    ctx_pos = Tensor(ctx.positions)
    tgt_pos = Tensor(np.asarray(target_positions, dtype=np.float64))
    mu, sigma = _latent_path(params, ctx_pairs)
    r = _deterministic_path(params, ctx_pairs, ctx_pos, tgt_pos)
    return mu, sigma, r


def encode(params, context, target_positions):
    """Encode a context set against target positions.

    Returns the global latent Gaussian (permutation-invariant in the
    context) and one deterministic representation row per target position.
    """
    if len(context) == 0:
        raise ContractViolation("encode requires a non-empty context")
    target_positions = np.asarray(target_positions, dtype=np.float64)
    if target_positions.ndim != 2 or target_positions.shape[1] != POSITION_DIM:
        raise ContractViolation("target positions must be N x 3")
    _check_coords(context.positions)
    _check_coords(target_positions)
    mu, sigma, r = _encode_t(params, context, target_positions)
    return (
        LatentGaussian(mu.data.ravel().copy(), sigma.data.ravel().copy()),
        DeterministicRep(r.data.copy()),
    )


def _check_coords(pos):
    if pos.size and (pos.min() < 0.0 or pos.max() > 1.0):
        raise ContractViolation("coordinates must lie in [0,1]")


def _decoder_forward(params, inputs_t):
    t = params.tensors
    h = ad.relu(ad.affine(inputs_t, t["dec_w1"], t["dec_b1"]))
    h = ad.relu(ad.affine(h, t["dec_w2"], t["dec_b2"]))
    h = ad.relu(ad.affine(h, t["dec_w3"], t["dec_b3"]))
    return ad.sigmoid(ad.affine(h, t["dec_w4"], t["dec_b4"]))


def _decode_t(params, z_t, r_t, tgt_pos_t):
    n = r_t.shape[0]
    z_rep = ad.repeat_rows(z_t, n)
    inputs = ad.concat_cols([r_t, z_rep, tgt_pos_t])
    return _decoder_forward(params, inputs)


def decode(params, z, r, target_positions):
    """Decode predicted pixel values at target positions; output in [0,1]."""
    if isinstance(r, DeterministicRep):
        r = r.r
    z = np.asarray(z, dtype=np.float64).ravel()
    r = np.asarray(r, dtype=np.float64)
    target_positions = np.asarray(target_positions, dtype=np.float64)
    if z.shape != (params.d_z,):
        raise ContractViolation(f"z must have length {params.d_z}")
    if r.ndim != 2 or r.shape[1] != params.d_r:
        raise ContractViolation(f"r must be N x {params.d_r}")
    if r.shape[0] != target_positions.shape[0]:
        raise ContractViolation("r row count must match target positions")
    out = _decode_t(params, Tensor(z.reshape(1, -1)), Tensor(r), Tensor(target_positions))
    return out.data.ravel().copy()


def decode_batch(params, z_batch, r_batch, target_positions):
    """Decode b candidates at once; returns a b x N value matrix."""
    z_batch = np.asarray(z_batch, dtype=np.float64)
    r_batch = np.asarray(r_batch, dtype=np.float64)
    b, n, _ = r_batch.shape
    z_tiled = np.repeat(z_batch[:, None, :], n, axis=1).reshape(b * n, -1)
    pos_tiled = np.tile(target_positions, (b, 1))
    inputs = np.concatenate([r_batch.reshape(b * n, -1), z_tiled, pos_tiled], axis=1)
    out = _decoder_forward(params, Tensor(inputs))
    return out.data.reshape(b, n)


def _gaussian_nll(pred_t, values, sigma_obs):
    """Negative log density of values under N(pred, sigma_obs^2), summed."""
    n = values.size
    target = Tensor(values.reshape(-1, 1))
    sse = ad.sum_all(ad.square(ad.sub(pred_t, target)))
    const = 0.5 * n * np.log(2.0 * np.pi * sigma_obs * sigma_obs)
    return ad.add_scalar(ad.scale(sse, 1.0 / (2.0 * sigma_obs * sigma_obs)), const)


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p):
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), diagonal, summed over dims."""
    log_ratio = ad.sub(ad.log(sigma_p), ad.log(sigma_q))
    quad = ad.div(
        ad.add(ad.square(sigma_q), ad.square(ad.sub(mu_q, mu_p))),
        ad.scale(ad.square(sigma_p), 2.0),
    )
    per_dim = ad.add_scalar(ad.add(log_ratio, quad), -0.5)
    return ad.sum_all(per_dim)


def elbo_parts(params, context, target, noise=None, rng=None, sigma_obs=OBS_SIGMA):
    """Negative log-likelihood and KL terms of the training objective.

    The latent sample is reparameterized from the target-set posterior; the
    KL is taken against the context-set distribution. When context and
    target are the same pixel set the KL term is exactly zero.
    """
    if len(context) == 0 or len(target) == 0:
        raise ContractViolation("elbo needs non-empty context and target")
    mu_c, sigma_c = _latent_path(params, _pairs_tensor(_canonical_order(context)))
    mu_t, sigma_t = _latent_path(params, _pairs_tensor(_canonical_order(target)))

    if noise is None:
        rng = rng or np.random.default_rng(0)
        noise = rng.standard_normal(LATENT_DIM)
    noise_t = Tensor(np.asarray(noise, dtype=np.float64).reshape(1, -1))
    z = ad.add(mu_t, ad.mul(sigma_t, noise_t))

    ctx = _canonical_order(context)
    r = _deterministic_path(params, _pairs_tensor(ctx), Tensor(ctx.positions),
                            Tensor(target.positions))
    pred = _decode_t(params, z, r, Tensor(target.positions))
    nll = _gaussian_nll(pred, target.values, sigma_obs)
    kl = kl_diag_gaussian(mu_t, sigma_t, mu_c, sigma_c)
    return nll, kl


def elbo_loss(params, context, target, noise=None, rng=None, sigma_obs=OBS_SIGMA):
    """Scalar training loss: reconstruction NLL plus latent KL (negated ELBO)."""
    nll, kl = elbo_parts(params, context, target, noise=noise, rng=rng,
                         sigma_obs=sigma_obs)
    return ad.add(nll, kl)


@dataclass
class TrainingLog:
    step_losses: list
    step_kl: list
    epoch_means: list


def train_np(params, images, epochs, batch=16, context_fraction_range=(0.5, 1.0),
             lr=1e-4, seed=0):
    """Pre-train the model on benign images by minimizing the negated ELBO.

    Per image per step a context subset is drawn with a fraction uniform in
    ``context_fraction_range``; the target is always the full pixel set.
    Re-running with the same seed reproduces the loss curve bit for bit.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractViolation("training needs a non-empty N x H x W x C image array")
    if images.shape[1:] != (params.image_h, params.image_w, params.image_c):
        raise ContractViolation("image dimensions do not match the model")
    lo, hi = context_fraction_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ContractViolation("context fraction range must satisfy 0 < lo <= hi <= 1")

    rng = np.random.default_rng(seed)
    opt = Adam(params.tensors.values(), lr=lr)
    n_images = images.shape[0]
    n_pix = params.n_pixels
    full_positions = pixel_positions(params.image_h, params.image_w, params.image_c)

    log = TrainingLog([], [], [])
    for _ in range(epochs):
        order = rng.permutation(n_images)
        epoch_losses = []
        for start in range(0, n_images, batch):
            chunk = order[start:start + batch]
            tape = Tape()
            for t in params.tensors.values():
                tape.watch(t)
            total = None
            kl_total = 0.0
            for img_idx in chunk:
                target = PixelContext(full_positions, images[img_idx].ravel())
                frac = rng.uniform(lo, hi)
                n_ctx = max(1, int(round(frac * n_pix)))
                if n_ctx >= n_pix:
                    ctx = target
                else:
                    pick = np.sort(rng.choice(n_pix, size=n_ctx, replace=False))
                    ctx = target.subset(pick)
                noise = rng.standard_normal(LATENT_DIM)
                nll, kl = elbo_parts(params, ctx, target, noise=noise)
                loss_i = ad.add(nll, kl)
                total = loss_i if total is None else ad.add(total, loss_i)
                kl_total += float(kl.data)
            loss = ad.scale(total, 1.0 / len(chunk))
            if not np.isfinite(loss.data):
                raise ContractViolation("non-finite training loss")
            backward(tape, loss)
            opt.step()
            log.step_losses.append(float(loss.data))
            log.step_kl.append(kl_total / len(chunk))
            epoch_losses.append(float(loss.data))
        log.epoch_means.append(float(np.mean(epoch_losses)))
    return log


def reconstruct(params, image):
    """Reconstruct an image: full-pixel context, z fixed at the latent mean."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (params.image_h, params.image_w, params.image_c):
        raise ContractViolation(
            f"image shape {image.shape} does not match model "
            f"({params.image_h}, {params.image_w}, {params.image_c})")
    ctx = image_to_context(image)
    latent, det = encode(params, ctx, ctx.positions)
    values = decode(params, latent.mu, det, ctx.positions)
    return values.reshape(image.shape)
