"""Compression model: encoder, decoder, keypoint estimator, patch
discriminator, the joint loss, and the training loop.

The encoder downsamples an F x T x C frame by a factor M per spatial axis
into D-dimensional latent cells; each cell is snapped to its nearest
codebook entry; the decoder and keypoint estimator run on the quantized
grid.  Training minimizes

    reconstruction + codebook + beta * commitment
    + lambda_weight * min(lambda_adaptive, lambda_max) * adversarial
    + keypoint

with the straight-through estimator carrying decoder gradients through the
quantizer, the codebook updated purely by its loss term, and the
discriminator trained on alternating minibatches after a warm-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec, storage
from .autodiff import (Tensor, backward, conv2d, conv_transpose2d, detach,
                       gather_rows, log, make_optimizer, parameter, relu, reshape,
                       seeded_uniform, sigmoid, straight_through, square, sub,
                       tmean, tsum, zero_grads)
from .config import RunConfig

PROB_EPS = 1e-7  # discriminator outputs live in [PROB_EPS, 1 - PROB_EPS]


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite epoch's bundle."""

    def __init__(self, message: str, last_good: "ModelBundle | None" = None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int, padding: int,
                 name: str):
        self.w = seeded_uniform(rng, (k, k, cin, cout), k * k * cin, f"{name}.w")
        self.b = parameter(np.zeros(cout), f"{name}.b")
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.stride, self.padding) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class ConvT:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int, padding: int,
                 name: str):
        self.w = seeded_uniform(rng, (k, k, cout, cin), k * k * cin, f"{name}.w")
        self.b = parameter(np.zeros(cout), f"{name}.b")
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w, self.stride, self.padding) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Dense:
    def __init__(self, rng, nin: int, nout: int, name: str):
        self.w = seeded_uniform(rng, (nin, nout), nin, f"{name}.w")
        self.b = parameter(np.zeros(nout), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Encoder:
    """Strided conv stack: F x T x C -> (F/M) x (T/M) x D."""

    def __init__(self, rng, c_in: int, embed_dim: int, downsample: int, width: int):
        self.downsample = downsample
        stages = int(math.log2(downsample)) if downsample > 1 else 0
        self.convs = []
        cin = c_in
        for s in range(stages):
            cout = width * (2 ** s)
            self.convs.append(Conv(rng, cin, cout, 4, 2, 1, f"encoder.conv{s}"))
            cin = cout
        self.proj = Conv(rng, cin, embed_dim, 1, 1, 0, "encoder.proj")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % self.downsample or x.shape[2] % self.downsample:
            raise ModelError(f"frame dims {x.shape[1:3]} not divisible by "
                             f"downsample factor {self.downsample}")
        h = x
        for conv in self.convs:
            h = relu(conv(h))
        return self.proj(h)

    def params(self) -> list[Tensor]:
        out = []
        for conv in self.convs:
            out += conv.params()
        return out + self.proj.params()


class Decoder:
    """Mirror of the encoder with transposed convs; last layer is linear."""

    def __init__(self, rng, c_out: int, embed_dim: int, downsample: int, width: int):
        stages = int(math.log2(downsample)) if downsample > 1 else 0
        widths = [width * (2 ** s) for s in range(stages)]  # e.g. [w, 2w]
        self.proj = Conv(rng, embed_dim, widths[-1] if widths else width, 1, 1, 0,
                         "decoder.proj")
        self.deconvs = []
        cin = widths[-1] if widths else width
        for s in reversed(range(stages)):
            cout = widths[s - 1] if s > 0 else c_out
            self.deconvs.append(ConvT(rng, cin, cout, 4, 2, 1,
                                      f"decoder.deconv{stages - 1 - s}"))
            cin = cout
        if not self.deconvs:  # downsample == 1
            self.deconvs.append(ConvT(rng, width, c_out, 1, 1, 0, "decoder.deconv0"))

    @property
    def last_layer(self) -> ConvT:
        return self.deconvs[-1]

    def __call__(self, zq: Tensor) -> Tensor:
        h = relu(self.proj(zq))
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.deconvs) - 1:
                h = relu(h)
        return h

    def params(self) -> list[Tensor]:
        out = self.proj.params()
        for deconv in self.deconvs:
            out += deconv.params()
        return out


class Estimator:
    """Quantized grid -> J keypoints in [0,1]^2 (linear head).

    Keeps spatial structure (strided convs + flatten): the pose signal lives
    in where the interference fringes sit, which global pooling would erase.
    """

    def __init__(self, rng, embed_dim: int, joints: int, grid_h: int, grid_w: int,
                 width: int = 24, fc_width: int = 64):
        self.joints = joints
        self.conv0 = Conv(rng, embed_dim, width, 3, 2, 1, "estimator.conv0")
        self.conv1 = Conv(rng, width, width, 3, 2, 1, "estimator.conv1")
        flat = ((grid_h + 1) // 2 + 1) // 2 * (((grid_w + 1) // 2 + 1) // 2) * width
        self._flat = flat
        self.fc1 = Dense(rng, flat, fc_width, "estimator.fc1")
        self.fc2 = Dense(rng, fc_width, joints * 2, "estimator.fc2")

    def __call__(self, zq: Tensor) -> Tensor:
        h = relu(self.conv0(zq))
        h = relu(self.conv1(h))
        flat = h.shape[1] * h.shape[2] * h.shape[3]
        if flat != self._flat:
            raise ModelError(f"estimator built for flat width {self._flat}, "
                             f"got grid {zq.shape[1:3]} -> {flat}")
        h = relu(self.fc1(reshape(h, (h.shape[0], flat))))
        out = self.fc2(h)
        return reshape(out, (out.shape[0], self.joints, 2))

    def params(self) -> list[Tensor]:
        return (self.conv0.params() + self.conv1.params()
                + self.fc1.params() + self.fc2.params())


class Discriminator:
    """3-layer conv patch head; emits per-patch real/fake probabilities.

    Patches tile the frame every 8 samples along both axes; outputs are
    squeezed into [PROB_EPS, 1 - PROB_EPS] so the log terms stay finite.
    """

    def __init__(self, rng, c_in: int, width: int = 12):
        self.conv0 = Conv(rng, c_in, width, 4, 2, 1, "disc.conv0")
        self.conv1 = Conv(rng, width, 2 * width, 4, 2, 1, "disc.conv1")
        self.conv2 = Conv(rng, 2 * width, 1, 2, 2, 0, "disc.conv2")

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv0(x))
        h = relu(self.conv1(h))
        logits = self.conv2(h)
        return sigmoid(logits) * (1.0 - 2 * PROB_EPS) + PROB_EPS

    def params(self) -> list[Tensor]:
        return self.conv0.params() + self.conv1.params() + self.conv2.params()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def vq_loss(x: Tensor, x_hat: Tensor, z: Tensor, z_q: Tensor,
            beta: float) -> tuple[Tensor, dict[str, Tensor]]:
    """Sum-of-squares reconstruction + codebook + beta * commitment.

    Stop-gradients make the codebook term train only the entries and the
    commitment term train only the encoder.
    """
    if x.shape != x_hat.shape:
        raise ModelError(f"x/x_hat shape mismatch {x.shape} vs {x_hat.shape}")
    if z.shape != z_q.shape:
        raise ModelError(f"z/z_q shape mismatch {z.shape} vs {z_q.shape}")
    l_rec = tsum(square(sub(x, x_hat)))
    l_codebook = tsum(square(sub(detach(z), z_q)))
    l_commit = tsum(square(sub(detach(z_q), z)))
    total = l_rec + l_codebook + beta * l_commit
    return total, {"rec": l_rec, "codebook": l_codebook, "commit": l_commit}


def keypoint_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Sum of squared coordinate errors."""
    if y_hat.shape != y.shape:
        raise ModelError(f"keypoint shape mismatch {y_hat.shape} vs {y.shape}")
    return tsum(square(sub(y_hat, y)))


def gan_losses(x: Tensor, x_hat: Tensor, dis) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from per-patch probabilities.

    The discriminator maximizes mean[log D(x) + log(1 - D(x_hat))]; its loss
    is the negation.  The generator minimizes the non-saturating
    -mean[log D(x_hat)].
    """
    p_real = dis(x)
    p_fake = dis(detach(x_hat))
    value = tmean(log(p_real)) + tmean(log(sub(1.0, p_fake)))
    l_d = -value
    l_g = -tmean(log(dis(x_hat)))
    return l_d, l_g


def adaptive_lambda(grad_rec_norm: float, grad_gan_norm: float,
                    delta: float = 1e-6) -> float:
    """Gradient-ratio weight balancing reconstruction and adversarial terms."""
    if grad_rec_norm < 0 or grad_gan_norm < 0:
        raise ModelError(f"gradient norms must be >= 0, "
                         f"got ({grad_rec_norm}, {grad_gan_norm})")
    return grad_rec_norm / (grad_gan_norm + delta)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: Decoder
    estimator: Estimator
    discriminator: Discriminator
    codebook: codec.Codebook
    hyper: dict[str, float]
    transformer: "object | None" = None    # recovery.IndexTransformer once trained

    def gen_params(self) -> list[Tensor]:
        return (self.encoder.params() + self.decoder.params() + self.estimator.params())

    def all_params(self) -> list[Tensor]:
        return self.gen_params() + self.discriminator.params()

    # numpy-facing inference helpers --------------------------------
    def encode(self, x: np.ndarray) -> np.ndarray:
        """(F,T,C) -> (F/M,T/M,D); batched input adds a leading N."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        z = self.encoder(Tensor(x[None] if single else x)).data
        return z[0] if single else z

    def quantized(self, z: np.ndarray, frame_id: int = 0):
        return codec.quantize(z, self.codebook, frame_id=frame_id)

    def decode(self, zq: np.ndarray) -> np.ndarray:
        zq = np.asarray(zq, dtype=np.float64)
        single = zq.ndim == 3
        batch = zq[None] if single else zq
        if batch.shape[-1] != self.hyper["embed_dim"]:
            raise ModelError(f"latent dim {batch.shape[-1]} != "
                             f"embed_dim {self.hyper['embed_dim']}")
        x = self.decoder(Tensor(batch)).data
        return x[0] if single else x

    def estimate(self, zq: np.ndarray) -> np.ndarray:
        zq = np.asarray(zq, dtype=np.float64)
        single = zq.ndim == 3
        batch = zq[None] if single else zq
        if batch.shape[-1] != self.hyper["embed_dim"]:
            raise ModelError(f"latent dim {batch.shape[-1]} != "
                             f"embed_dim {self.hyper['embed_dim']}")
        y = self.estimator(Tensor(batch)).data
        return y[0] if single else y

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Full local codec path: encode -> quantize -> decode."""
        z = self.encode(x)
        if z.ndim == 3:
            _, zq = self.quantized(z)
        else:
            idx = codec.nearest_indices(z, self.codebook.entries)
            zq = self.codebook.entries[idx]
        return self.decode(zq)

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data.copy() for p in self.all_params()}
        out["codebook.entries"] = self.codebook.entries.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.all_params():
            p.data[...] = state[p.name]
        self.codebook = codec.make_codebook(state["codebook.entries"],
                                            parent_id=self.codebook.parent_id)


def build_bundle(cfg: RunConfig, seed: int,
                 codebook_entries: np.ndarray | None = None) -> ModelBundle:
    """Fresh models with seeded init; codebook defaults to unit Gaussian."""
    rng = np.random.default_rng(seed)
    grid_h = cfg.f_dim // cfg.downsample
    grid_w = cfg.t_dim // cfg.downsample
    enc = Encoder(rng, cfg.c_dim, cfg.embed_dim, cfg.downsample, cfg.enc_width)
    dec = Decoder(rng, cfg.c_dim, cfg.embed_dim, cfg.downsample, cfg.enc_width)
    est = Estimator(rng, cfg.embed_dim, cfg.joints, grid_h, grid_w)
    dis = Discriminator(rng, cfg.c_dim)
    if codebook_entries is None:
        codebook_entries = rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.embed_dim))
    hyper = {
        "beta": cfg.beta, "lambda_weight": cfg.lambda_weight,
        "lambda_max": cfg.lambda_max, "codebook_size": float(cfg.codebook_size),
        "embed_dim": float(cfg.embed_dim), "downsample": float(cfg.downsample),
        "enc_width": float(cfg.enc_width), "c_dim": float(cfg.c_dim),
        "joints": float(cfg.joints), "grid_h": float(grid_h), "grid_w": float(grid_w),
    }
    return ModelBundle(encoder=enc, decoder=dec, estimator=est, discriminator=dis,
                       codebook=codec.make_codebook(codebook_entries), hyper=hyper)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Per-epoch means of the loss components (per-element scale)."""

    epoch: int
    l_vq: float
    l_rec: float
    l_commit: float
    l_codebook: float
    l_gan_g: float
    l_gan_d: float
    l_keypoint: float
    lambda_: float

    def __post_init__(self):
        vals = [self.l_vq, self.l_rec, self.l_commit, self.l_codebook,
                self.l_gan_g, self.l_gan_d, self.l_keypoint, self.lambda_]
        if not all(np.isfinite(v) for v in vals):
            raise ModelError(f"non-finite loss report at epoch {self.epoch}")
        if self.lambda_ < 0:
            raise ModelError("lambda must be >= 0")


def _init_codebook_from_latents(encoder: Encoder, x_train: np.ndarray,
                                size: int, rng: np.random.Generator) -> np.ndarray:
    """Seed codebook entries from actual encoder outputs to avoid dead codes."""
    sample = x_train[rng.choice(len(x_train), size=min(64, len(x_train)), replace=False)]
    z = encoder(Tensor(sample)).data
    cells = z.reshape(-1, z.shape[-1])
    if len(cells) >= size:
        picks = rng.choice(len(cells), size=size, replace=False)
        entries = cells[picks].copy()
    else:
        picks = rng.choice(len(cells), size=size, replace=True)
        entries = cells[picks] + rng.normal(0, 1e-3, size=(size, cells.shape[1]))
    return entries


def _grad_norm_for(loss: Tensor, w: Tensor, params: list[Tensor]) -> float:
    zero_grads(params)
    backward(loss)
    norm = 0.0 if w.grad is None else float(np.sqrt((w.grad ** 2).sum()))
    zero_grads(params)
    return norm


def train(dataset, cfg: RunConfig, seed: int, checkpoint_dir=None,
          on_step=None) -> tuple[ModelBundle, list[LossReport]]:
    """Run the full training schedule; deterministic given (dataset, cfg, seed).

    Per minibatch either the generator side (encoder, decoder, estimator,
    codebook) or the discriminator is updated, never both.  The adversarial
    term joins after ``disc_warmup_frac`` of the epochs with the adaptive
    gradient-ratio weight, clipped at lambda_max.  A rolling checkpoint is
    written after each finite epoch when checkpoint_dir is given; on a
    non-finite loss the last finite state is kept and reported.
    """
    rng = np.random.default_rng(seed)
    bundle = build_bundle(cfg, seed)

    x_train = dataset.amplitudes(dataset.train_idx)
    y_train = dataset.joints(dataset.train_idx)
    if len(x_train) == 0:
        raise ModelError("dataset has no training frames")

    cb_entries = _init_codebook_from_latents(bundle.encoder, x_train,
                                             cfg.codebook_size, rng)
    cb_param = parameter(cb_entries, "codebook.entries")
    gen_params = bundle.gen_params() + [cb_param]
    disc_params = bundle.discriminator.params()

    if cfg.lr > 0:
        opt_gen = make_optimizer(cfg.optimizer, gen_params, cfg.lr, cfg.momentum)
        opt_disc = make_optimizer(cfg.optimizer, disc_params, cfg.lr, cfg.momentum)
    else:
        opt_gen = opt_disc = None  # lr == 0: evaluate losses, never update

    warmup_epochs = int(cfg.disc_warmup_frac * cfg.epochs)
    reports: list[LossReport] = []
    last_good: dict[str, np.ndarray] | None = None
    step = 0

    def snapshot() -> dict[str, np.ndarray]:
        state = bundle.state()
        state["codebook.entries"] = cb_param.data.copy()
        return state

    def fail(msg: str):
        last = None
        if last_good is not None:
            bundle.load_state(last_good)
            last = bundle
        raise TrainingDiverged(msg, last_good=last)

    for epoch in range(cfg.epochs):
        gan_active = epoch >= warmup_epochs
        order = rng.permutation(len(x_train))
        sums = {k: 0.0 for k in ("vq", "rec", "commit", "codebook", "gan_g",
                                 "gan_d", "key", "lam")}
        gen_steps = disc_steps = 0
        usage = np.zeros(cfg.codebook_size, dtype=np.int64)

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = Tensor(x_train[batch])
            yb = Tensor(y_train[batch])

            z = bundle.encoder(xb)
            idx = codec.nearest_indices(z.data, cb_param.data)
            usage += np.bincount(idx.ravel(), minlength=cfg.codebook_size)
            zq = gather_rows(cb_param, idx)
            zq_st = straight_through(z, zq)
            x_hat = bundle.decoder(zq_st)
            y_hat = bundle.estimator(zq_st)

            l_vq_raw, comps = vq_loss(xb, x_hat, z, zq, cfg.beta)
            l_rec_m = comps["rec"] * (1.0 / xb.size)
            l_cb_m = comps["codebook"] * (1.0 / z.size)
            l_commit_m = comps["commit"] * (1.0 / z.size)
            l_key_m = keypoint_loss(y_hat, yb) * (1.0 / yb.size)
            l_vq_m = l_rec_m + l_cb_m + cfg.beta * l_commit_m

            do_disc = gan_active and (step % 2 == 1)
            lam = 0.0
            l_d_val = l_g_val = 0.0

            if do_disc:
                l_d, _ = gan_losses(xb, x_hat, bundle.discriminator)
                l_d_val = l_d.item()
                if not np.isfinite(l_d_val):
                    fail(f"non-finite discriminator loss at epoch {epoch}")
                if opt_disc is not None:
                    zero_grads(gen_params + disc_params)
                    backward(l_d)
                    opt_disc.step()
                disc_steps += 1
                if on_step:
                    on_step(epoch, step, "disc")
            else:
                if gan_active:
                    _, l_g = gan_losses(xb, x_hat, bundle.discriminator)
                    l_g_val = l_g.item()
                    w_last = bundle.decoder.last_layer.w
                    rec_norm = _grad_norm_for(l_rec_m, w_last, gen_params + disc_params)
                    gan_norm = _grad_norm_for(l_g, w_last, gen_params + disc_params)
                    lam = min(adaptive_lambda(rec_norm, gan_norm), cfg.lambda_max)
                    total = l_vq_m + l_key_m + (cfg.lambda_weight * lam) * l_g
                else:
                    total = l_vq_m + l_key_m
                if not np.isfinite(total.item()):
                    fail(f"non-finite training loss at epoch {epoch}")
                if opt_gen is not None:
                    zero_grads(gen_params + disc_params)
                    backward(total)
                    opt_gen.step()
                gen_steps += 1
                if on_step:
                    on_step(epoch, step, "gen")

            sums["vq"] += l_vq_m.item()
            sums["rec"] += l_rec_m.item()
            sums["commit"] += l_commit_m.item()
            sums["codebook"] += l_cb_m.item()
            sums["gan_g"] += l_g_val
            sums["gan_d"] += l_d_val
            sums["key"] += l_key_m.item()
            sums["lam"] += lam
            step += 1

        # revive codes unused this epoch from live latent cells; a code with
        # no assignments gets no gradient and would otherwise stay dead
        dead = np.flatnonzero(usage == 0)
        if len(dead) and opt_gen is not None:
            sample = x_train[rng.choice(len(x_train),
                                        size=min(16, len(x_train)), replace=False)]
            cells = bundle.encoder(Tensor(sample)).data.reshape(-1, cfg.embed_dim)
            picks = rng.choice(len(cells), size=len(dead),
                               replace=len(cells) < len(dead))
            cb_param.data[dead] = cells[picks]

        n_batches = gen_steps + disc_steps
        reports.append(LossReport(
            epoch=epoch,
            l_vq=sums["vq"] / n_batches,
            l_rec=sums["rec"] / n_batches,
            l_commit=sums["commit"] / n_batches,
            l_codebook=sums["codebook"] / n_batches,
            l_gan_g=sums["gan_g"] / max(gen_steps, 1),
            l_gan_d=sums["gan_d"] / max(disc_steps, 1),
            l_keypoint=sums["key"] / n_batches,
            lambda_=sums["lam"] / max(gen_steps, 1),
        ))
        last_good = snapshot()
        _refresh_codebook(bundle, cb_param.data)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(bundle, Path(checkpoint_dir) / "checkpoint.tsmd")

    _refresh_codebook(bundle, cb_param.data)
    if opt_gen is not None and cfg.est_refine_epochs > 0:
        _refine_estimator(bundle, x_train, y_train, cfg, rng)
    return bundle, reports


def _refine_estimator(bundle: ModelBundle, x_train: np.ndarray, y_train: np.ndarray,
                      cfg: RunConfig, rng: np.random.Generator) -> None:
    """Extra estimator-only passes on the frozen encoder/codebook.

    The joint loop updates the estimator while its quantized input keeps
    drifting; a short refinement on the final, fixed quantized latents lets
    the pose head actually converge.  Encoder, decoder, codebook, and
    discriminator are untouched.
    """
    chunks = []
    for start in range(0, len(x_train), 64):
        z = bundle.encoder(Tensor(x_train[start:start + 64])).data
        idx = codec.nearest_indices(z, bundle.codebook.entries)
        chunks.append(bundle.codebook.entries[idx])
    zq_all = np.concatenate(chunks)

    params = bundle.estimator.params()
    opt = make_optimizer("adam", params, 1e-3)
    for _ in range(cfg.est_refine_epochs):
        order = rng.permutation(len(zq_all))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            y_hat = bundle.estimator(Tensor(zq_all[batch]))
            loss = keypoint_loss(y_hat, Tensor(y_train[batch])) * (1.0 / y_hat.size)
            zero_grads(params)
            backward(loss)
            opt.step()


def _refresh_codebook(bundle: ModelBundle, entries: np.ndarray) -> None:
    bundle.codebook = codec.make_codebook(entries)


# ---------------------------------------------------------------------------
# persistence (.tsmd)
# ---------------------------------------------------------------------------

def save_model(bundle: ModelBundle, path) -> None:
    w = storage.Writer(storage.MAGIC_MODEL, storage.MODEL_VERSION)
    w.u32(len(bundle.hyper))
    for name in sorted(bundle.hyper):
        w.text(name)
        w.f64(bundle.hyper[name])
    w.u8(1 if bundle.codebook.parent_id else 0)
    w.raw(bundle.codebook.parent_id or b"\x00" * 8)

    arrays = {p.name: p.data for p in bundle.all_params()}
    arrays["codebook.entries"] = bundle.codebook.entries
    w.u32(len(arrays))
    for name in sorted(arrays):
        w.text(name)
        w.array(arrays[name])

    if bundle.transformer is not None:
        w.u8(1)
        bundle.transformer.write_to(w)
    else:
        w.u8(0)
    storage.write_file(path, w.finish())


def load_model(path) -> ModelBundle:
    from . import recovery  # deferred: recovery imports models' bundle consumers

    r = storage.read_file(path, storage.MAGIC_MODEL, storage.MODEL_VERSION)
    hyper = {}
    for _ in range(r.u32()):
        name = r.text()
        hyper[name] = r.f64()
    has_parent = r.u8()
    parent = r.raw(8)

    arrays = {}
    for _ in range(r.u32()):
        name = r.text()
        arrays[name] = r.array()

    m = int(hyper["downsample"])
    cfg = RunConfig(
        c_dim=int(hyper["c_dim"]), joints=int(hyper["joints"]),
        embed_dim=int(hyper["embed_dim"]), downsample=m,
        f_dim=int(hyper["grid_h"]) * m, t_dim=int(hyper["grid_w"]) * m,
        enc_width=int(hyper["enc_width"]), codebook_size=int(hyper["codebook_size"]),
        beta=hyper["beta"], lambda_weight=hyper["lambda_weight"],
        lambda_max=hyper["lambda_max"],
    )
    bundle = build_bundle(cfg, seed=0, codebook_entries=arrays["codebook.entries"])
    bundle.hyper = hyper
    for p in bundle.all_params():
        if p.name not in arrays:
            raise storage.FormatError(f"model file missing parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise storage.FormatError(
                f"parameter {p.name!r} has shape {arrays[p.name].shape}, "
                f"expected {p.data.shape}")
        p.data[...] = arrays[p.name]
    bundle.codebook = codec.make_codebook(arrays["codebook.entries"],
                                          parent_id=parent if has_parent else None)
    if r.u8():
        bundle.transformer = recovery.IndexTransformer.read_from(r)
    r.done()
    return bundle
