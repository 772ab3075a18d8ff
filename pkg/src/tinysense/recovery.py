"""Lost-index simulation and recovery with a sliding-window transformer.

Transmission loss turns index-map cells into LOST sentinels.  A small
transformer sees the P x P window around each lost cell (surviving indices,
MASK tokens for still-missing neighbors, a dedicated PAD embedding beyond
the grid edge) and predicts a distribution over the S codewords for the
center.  Recovery fills lost cells in raster order, so earlier predictions
are visible context for later ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, storage
from .autodiff import (Tensor, backward, gather_rows, layer_norm, log,
                       make_optimizer, parameter, reshape, relu, seeded_uniform,
                       softmax, tmean, transpose, tsum, zero_grads)
from .codec import LOST, IndexMap
from .config import RunConfig


class RecoveryError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    """Deterministic index-loss pattern: round(alpha * N) cells masked."""

    alpha: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise RecoveryError(f"mask ratio must be in [0,1], got {self.alpha}")

    def mask_for(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean grid with exactly round(alpha*N) True cells."""
        gh, gw = shape
        n = gh * gw
        k = int(round(self.alpha * n))
        mask = np.zeros(n, dtype=bool)
        if k:
            picks = np.random.default_rng(self.seed).choice(n, size=k, replace=False)
            mask[picks] = True
        return mask.reshape(gh, gw)


def apply_mask(imap: IndexMap, spec: MaskSpec) -> IndexMap:
    """Replace the spec's cells with LOST; everything else is untouched."""
    if imap.has_lost():
        raise RecoveryError("index map already contains LOST cells")
    grid = imap.grid.copy()
    grid[spec.mask_for(grid.shape)] = LOST
    return IndexMap(grid=grid, codebook_id=imap.codebook_id, frame_id=imap.frame_id)


# ---------------------------------------------------------------------------
# windowed transformer
# ---------------------------------------------------------------------------

def _window_offsets(p: int) -> tuple[int, int]:
    """Rows/cols lo..hi around the target; even windows anchor top-left."""
    lo = -((p - 1) // 2)
    hi = p // 2
    return lo, hi


class IndexTransformer:
    """Token table of S+1 entries (codewords + MASK) plus a PAD embedding,
    2-D positional embeddings over the window, and a softmax head over S."""

    def __init__(self, vocab_size: int, window: int = 3, width: int = 64,
                 heads: int = 4, blocks: int = 2, seed: int = 0):
        if width % heads:
            raise RecoveryError(f"width {width} must divide by heads {heads}")
        if not 2 <= window <= 5:
            raise RecoveryError(f"window must be in [2,5], got {window}")
        self.vocab = vocab_size          # number of codewords S
        self.window = window
        self.width = width
        self.heads = heads
        self.blocks = blocks
        self.mask_token = vocab_size
        self.pad_token = vocab_size + 1  # internal marker, embeds via pad_emb

        rng = np.random.default_rng(seed)
        w = width
        p2 = window * window
        self.params: dict[str, Tensor] = {}

        def par(name, shape, fan_in=None, zero=False):
            if zero:
                t = parameter(np.zeros(shape), name)
            else:
                t = seeded_uniform(rng, shape, fan_in if fan_in else shape[0], name)
            self.params[name] = t
            return t

        par("tok_emb", (vocab_size + 1, w), fan_in=4)
        par("pad_emb", (1, w), fan_in=4)
        par("pos_emb", (p2, w), fan_in=4)
        for b in range(blocks):
            for nm in ("wq", "wk", "wv", "wo"):
                par(f"block{b}.{nm}", (w, w), fan_in=w)
            par(f"block{b}.ln1.g", (w,), zero=True).data[...] = 1.0
            par(f"block{b}.ln1.b", (w,), zero=True)
            par(f"block{b}.ln2.g", (w,), zero=True).data[...] = 1.0
            par(f"block{b}.ln2.b", (w,), zero=True)
            par(f"block{b}.ffn1.w", (w, 2 * w), fan_in=w)
            par(f"block{b}.ffn1.b", (2 * w,), zero=True)
            par(f"block{b}.ffn2.w", (2 * w, w), fan_in=2 * w)
            par(f"block{b}.ffn2.b", (w,), zero=True)
        par("lnf.g", (w,), zero=True).data[...] = 1.0
        par("lnf.b", (w,), zero=True)
        par("head.w", (w, vocab_size), zero=True)   # zero head: uniform start
        par("head.b", (vocab_size,), zero=True)

        lo, hi = _window_offsets(window)
        self._center_pos = (0 - lo) * window + (0 - lo)

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, tokens: np.ndarray) -> Tensor:
        """(B, P*P) int tokens -> (B, S) class probabilities for the center."""
        p = self.params
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.window ** 2:
            raise RecoveryError(f"tokens must be (B, {self.window ** 2}), "
                                f"got {tokens.shape}")
        is_pad = (tokens == self.pad_token)[..., None].astype(np.float64)
        safe = np.minimum(tokens, self.mask_token)

        x = gather_rows(p["tok_emb"], safe) * (1.0 - is_pad) + p["pad_emb"] * is_pad
        x = x + p["pos_emb"]

        b, p2, w = tokens.shape[0], self.window ** 2, self.width
        dh = w // self.heads
        scale = 1.0 / np.sqrt(dh)
        for blk in range(self.blocks):
            h = layer_norm(x) * p[f"block{blk}.ln1.g"] + p[f"block{blk}.ln1.b"]
            q = _split_heads(h @ p[f"block{blk}.wq"], self.heads)
            k = _split_heads(h @ p[f"block{blk}.wk"], self.heads)
            v = _split_heads(h @ p[f"block{blk}.wv"], self.heads)
            att = softmax((q @ transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
            ctx = _merge_heads(att @ v)
            x = x + (ctx @ p[f"block{blk}.wo"])
            h2 = layer_norm(x) * p[f"block{blk}.ln2.g"] + p[f"block{blk}.ln2.b"]
            ffn = relu(h2 @ p[f"block{blk}.ffn1.w"] + p[f"block{blk}.ffn1.b"])
            x = x + (ffn @ p[f"block{blk}.ffn2.w"] + p[f"block{blk}.ffn2.b"])

        x = layer_norm(x) * p["lnf.g"] + p["lnf.b"]
        onehot = np.zeros((p2, 1))
        onehot[self._center_pos] = 1.0
        center = tsum(x * onehot, axis=1)            # (B, W)
        logits = center @ p["head.w"] + p["head.b"]
        return softmax(logits, axis=-1)

    def probabilities(self, tokens: np.ndarray) -> np.ndarray:
        return self.forward(tokens).data

    # persistence ----------------------------------------------------
    def write_to(self, w: storage.Writer) -> None:
        meta = {"vocab": self.vocab, "window": self.window, "width": self.width,
                "heads": self.heads, "blocks": self.blocks}
        w.u32(len(meta))
        for name in sorted(meta):
            w.text(name)
            w.f64(float(meta[name]))
        w.u32(len(self.params))
        for name in sorted(self.params):
            w.text(name)
            w.array(self.params[name].data)

    @classmethod
    def read_from(cls, r: storage.Reader) -> "IndexTransformer":
        meta = {}
        for _ in range(r.u32()):
            name = r.text()
            meta[name] = r.f64()
        t = cls(vocab_size=int(meta["vocab"]), window=int(meta["window"]),
                width=int(meta["width"]), heads=int(meta["heads"]),
                blocks=int(meta["blocks"]))
        arrays = {}
        for _ in range(r.u32()):
            name = r.text()
            arrays[name] = r.array()
        for name, tensor in t.params.items():
            if name not in arrays:
                raise storage.FormatError(f"transformer file missing {name!r}")
            tensor.data[...] = arrays[name]
        return t


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, w = t.shape
    return transpose(reshape(t, (b, n, heads, w // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, n, h * dh))


# ---------------------------------------------------------------------------
# window extraction and training
# ---------------------------------------------------------------------------

def extract_windows(grid: np.ndarray, window: int, mask_token: int,
                    pad_token: int) -> tuple[np.ndarray, np.ndarray]:
    """All P*P windows (one per cell, raster order) and their center values.

    LOST cells become MASK tokens; positions beyond the grid edge become PAD.
    """
    gh, gw = grid.shape
    lo, hi = _window_offsets(window)
    padded = np.pad(grid, ((-lo, hi), (-lo, hi)), constant_values=pad_token)
    tokens = np.empty((gh * gw, window * window), dtype=np.int64)
    col = 0
    for di in range(lo, hi + 1):
        for dj in range(lo, hi + 1):
            block = padded[-lo + di:-lo + di + gh, -lo + dj:-lo + dj + gw]
            tokens[:, col] = block.ravel()
            col += 1
    tokens[tokens == LOST] = mask_token
    return tokens, grid.ravel().copy()


def _grids_from(index_maps) -> list[np.ndarray]:
    grids = []
    for m in index_maps:
        grids.append(m.grid if isinstance(m, IndexMap) else np.asarray(m))
    return grids


def train_transformer(index_maps, cfg: RunConfig, seed: int = 0,
                      vocab_size: int | None = None) -> IndexTransformer:
    """Fit the recovery model on index maps quantized with a fixed codebook.

    Every training example is a window whose center is masked; the other
    in-grid positions drop out with a per-batch ratio drawn uniformly from
    [rec_alpha_lo, rec_alpha_hi], so the model sees the loss rates it will
    face at recovery time.
    """
    grids = _grids_from(index_maps)
    if not grids:
        raise RecoveryError("no index maps to train on")
    s = int(vocab_size if vocab_size is not None else cfg.codebook_size)
    top = max(int(g.max()) for g in grids)
    if top >= s:
        raise RecoveryError(f"index {top} out of range for codebook size {s}: "
                            "vocabulary mismatch with the quantizing codebook")
    if min(g.min() for g in grids) < 0:
        raise RecoveryError("training maps must not contain LOST cells")

    model = IndexTransformer(vocab_size=s, window=cfg.window, width=cfg.rec_width,
                             heads=cfg.rec_heads, blocks=cfg.rec_blocks, seed=seed)
    all_tokens = []
    all_targets = []
    for g in grids:
        tok, tgt = extract_windows(g, cfg.window, model.mask_token, model.pad_token)
        all_tokens.append(tok)
        all_targets.append(tgt)
    tokens = np.concatenate(all_tokens)
    targets = np.concatenate(all_targets)

    rng = np.random.default_rng(seed)
    opt = make_optimizer(cfg.rec_optimizer, model.param_list(), cfg.rec_lr)
    center = model._center_pos
    params = model.param_list()

    for _ in range(cfg.rec_epochs):
        order = rng.permutation(len(tokens))
        for start in range(0, len(order), cfg.rec_batch_size):
            rows = order[start:start + cfg.rec_batch_size]
            batch = tokens[rows].copy()
            tgt = targets[rows]
            alpha = rng.uniform(cfg.rec_alpha_lo, cfg.rec_alpha_hi)
            drop = rng.random(batch.shape) < alpha
            drop &= batch != model.pad_token
            batch[drop] = model.mask_token
            batch[:, center] = model.mask_token

            probs = model.forward(batch)
            onehot = np.zeros((len(rows), s))
            onehot[np.arange(len(rows)), tgt] = 1.0
            nll = -tmean(log(tsum(probs * onehot, axis=1)))
            zero_grads(params)
            backward(nll)
            opt.step()
    return model


def heldout_nll(model: IndexTransformer, index_maps, max_windows: int = 4096,
                seed: int = 0) -> float:
    """Mean -log p(true center) with only the center masked."""
    grids = _grids_from(index_maps)
    toks, tgts = [], []
    for g in grids:
        tok, tgt = extract_windows(g, model.window, model.mask_token, model.pad_token)
        toks.append(tok)
        tgts.append(tgt)
    tokens = np.concatenate(toks)
    targets = np.concatenate(tgts)
    if len(tokens) > max_windows:
        picks = np.random.default_rng(seed).choice(len(tokens), size=max_windows,
                                                   replace=False)
        tokens, targets = tokens[picks], targets[picks]
    tokens = tokens.copy()
    tokens[:, model._center_pos] = model.mask_token
    total = 0.0
    for start in range(0, len(tokens), 1024):
        probs = model.probabilities(tokens[start:start + 1024])
        p_true = probs[np.arange(len(probs)), targets[start:start + 1024]]
        total += float(-np.log(p_true).sum())
    return total / len(tokens)


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------

def recover(imap: IndexMap, model: IndexTransformer, mode: str = "argmax",
            seed: int = 0) -> IndexMap:
    """Fill every LOST cell; surviving cells pass through bit-exact.

    Cells are filled in raster order and each prediction becomes visible
    context for the windows that follow.  mode="argmax" is deterministic;
    mode="sample" draws from the predicted distribution with the given seed.
    """
    if mode not in ("argmax", "sample"):
        raise RecoveryError(f"mode must be 'argmax' or 'sample', got {mode!r}")
    gh, gw = imap.grid.shape
    if model.window > gh or model.window > gw:
        raise RecoveryError(f"window {model.window} larger than grid ({gh},{gw})")
    if int(imap.grid.max(initial=0)) >= model.vocab:
        raise RecoveryError(f"index {int(imap.grid.max())} out of range for "
                            f"vocabulary {model.vocab}")
    grid = imap.grid.copy()
    lost = np.argwhere(grid == LOST)
    if not len(lost):
        return IndexMap(grid=grid, codebook_id=imap.codebook_id,
                        frame_id=imap.frame_id)

    rng = np.random.default_rng(seed)
    lo, hi = _window_offsets(model.window)
    pad = max(-lo, hi)
    work = np.pad(grid, pad, constant_values=model.pad_token).astype(np.int64)
    work[work == LOST] = model.mask_token

    for ci, cj in lost:  # np.argwhere is already raster (row-major) order
        pi, pj = ci + pad, cj + pad
        win = work[pi + lo:pi + hi + 1, pj + lo:pj + hi + 1].reshape(1, -1)
        probs = model.probabilities(win)[0]
        if mode == "argmax":
            choice = int(probs.argmax())
        else:
            choice = int(rng.choice(model.vocab, p=probs / probs.sum()))
        work[pi, pj] = choice
        grid[ci, cj] = choice

    return IndexMap(grid=grid, codebook_id=imap.codebook_id, frame_id=imap.frame_id)
