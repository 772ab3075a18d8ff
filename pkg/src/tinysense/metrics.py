"""Evaluation metrics: NMSE (dB), PCK, MPJPE, compression rate reporting.

PCK normalization: a joint counts as correct when its Euclidean error is
<= a% of the diagonal of the ground-truth pose's bounding box (inclusive).
The normalizer choice matters — published PCK numbers computed against
other normalizers are not directly comparable.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

NMSE_FLOOR_DB = -300.0  # stands in for -inf on exact reconstructions


class MetricError(ValueError):
    pass


def nmse_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10*log10(||x - x_hat||^2 / ||x||^2); lower is better."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    ref = float((x * x).sum())
    if ref <= 0.0:
        raise MetricError("reference signal has zero norm")
    err = float(((x - x_hat) ** 2).sum())
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(err / ref), NMSE_FLOOR_DB)


def mpjpe(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean Euclidean joint error in scene units. Accepts (J,2) or (N,J,2)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise MetricError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    return float(np.sqrt(((y_hat - y) ** 2).sum(axis=-1)).mean())


def pck(y_hat: np.ndarray, y: np.ndarray, a: float) -> float:
    """Percent of joints within a% of the ground-truth bounding-box diagonal.

    Per-pose normalizer; the threshold comparison is inclusive.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise MetricError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y_hat.ndim == 2:
        y_hat, y = y_hat[None], y[None]
    span = y.max(axis=1) - y.min(axis=1)             # (N, 2)
    diag = np.sqrt((span ** 2).sum(axis=1))          # (N,)
    if (diag <= 0).any():
        raise MetricError("degenerate pose: all joints coincide")
    err = np.sqrt(((y_hat - y) ** 2).sum(axis=-1))   # (N, J)
    correct = err <= (a / 100.0) * diag[:, None]
    return float(correct.mean() * 100.0)


@dataclass
class EvalReport:
    nmse_db: float
    pck: dict[float, float]            # threshold a -> percentage
    mpjpe: float
    eta: float
    frames_evaluated: int
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames_evaluated < 1:
            raise MetricError("report needs at least one evaluated frame")
        for a, v in self.pck.items():
            if not 0.0 <= v <= 100.0:
                raise MetricError(f"PCK_{a} = {v} outside [0, 100]")


def format_report(report: EvalReport) -> str:
    """Flat key = value text block."""
    lines = [
        f"frames_evaluated = {report.frames_evaluated}",
        f"nmse_db = {report.nmse_db:.4f}",
        f"mpjpe = {report.mpjpe:.6f}",
        f"eta = {report.eta:.2f}",
    ]
    for a in sorted(report.pck):
        lines.append(f"pck_{a:g} = {report.pck[a]:.2f}")
    for k in sorted(report.extras):
        lines.append(f"{k} = {report.extras[k]:.6f}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    keys = ["frames_evaluated", "nmse_db", "mpjpe", "eta"]
    vals = [str(report.frames_evaluated), f"{report.nmse_db:.6f}",
            f"{report.mpjpe:.6f}", f"{report.eta:.6f}"]
    for a in sorted(report.pck):
        keys.append(f"pck_{a:g}")
        vals.append(f"{report.pck[a]:.6f}")
    for k in sorted(report.extras):
        keys.append(k)
        vals.append(f"{report.extras[k]:.6f}")
    return ",".join(keys) + "\n" + ",".join(vals) + "\n"


def evaluate_bundle(dataset, bundle, epsilon: float = 0.0, frames=None, seed: int = 0,
                    use_recovery: bool = True,
                    pck_thresholds=(20.0, 30.0)) -> tuple[EvalReport, dict]:
    """Run the offline codec path over test frames and score it.

    epsilon > 0 masks that fraction of each frame's indices (seeded per
    frame) before decoding; lost cells are filled by the bundle's recovery
    transformer when present and use_recovery is True, else by index 0.
    Returns the report plus per-frame details for trend analysis.
    """
    from . import codec, recovery

    if frames is None:
        frames = list(dataset.test_idx)
    frames = list(frames)
    if not frames:
        raise MetricError("no frames selected for evaluation")

    f_dim, t_dim, c_dim = dataset.frames[frames[0]].shape
    m = int(bundle.hyper["downsample"])
    s = bundle.codebook.size
    eta = None
    per_frame = {"frame_id": [], "nmse_db": [], "lost": []}
    y_hat_all, y_true_all = [], []
    nmse_vals = []

    for k, i in enumerate(frames):
        frame = dataset.frames[i]
        x = frame.amplitude.astype(np.float64)
        z = bundle.encode(x)
        imap, _ = bundle.quantized(z, frame_id=frame.frame_id)
        if eta is None:
            eta = codec.compression_rate(f_dim, t_dim, c_dim, m, s)
        n_lost = 0
        if epsilon > 0:
            spec = recovery.MaskSpec(alpha=epsilon, seed=seed + 7919 * k)
            lossy = recovery.apply_mask(imap, spec)
            n_lost = len(lossy.lost_cells())
            if use_recovery and bundle.transformer is not None:
                imap = recovery.recover(lossy, bundle.transformer, mode="argmax")
            else:
                filled = lossy.grid.copy()
                filled[filled == codec.LOST] = 0
                imap = codec.IndexMap(grid=filled, codebook_id=lossy.codebook_id,
                                      frame_id=lossy.frame_id)
        zq = codec.dequantize(imap, bundle.codebook)
        x_hat = bundle.decode(zq)
        y_hat = bundle.estimate(zq)
        val = nmse_db(x, x_hat)
        nmse_vals.append(val)
        per_frame["frame_id"].append(frame.frame_id)
        per_frame["nmse_db"].append(val)
        per_frame["lost"].append(n_lost)
        y_hat_all.append(y_hat)
        y_true_all.append(dataset.labels[i].joints.astype(np.float64))

    y_hat_arr = np.stack(y_hat_all)
    y_true_arr = np.stack(y_true_all)
    report = EvalReport(
        nmse_db=float(np.mean(nmse_vals)),
        pck={a: pck(y_hat_arr, y_true_arr, a) for a in pck_thresholds},
        mpjpe=mpjpe(y_hat_arr, y_true_arr),
        eta=float(eta),
        frames_evaluated=len(frames),
        extras={"epsilon": float(epsilon)},
    )
    return report, per_frame


def dump_embeddings(dataset, bundle, path) -> int:
    """Write one CSV row per frame: frame_id, label, then D latent means.

    The latent mean is the spatial average of the quantized grid per channel;
    the label is a coarse pose class (quadrant of the mean joint position
    relative to the dataset average) usable as a plot color key.  Returns the
    number of rows written.
    """
    mean_pose = dataset.joints().mean(axis=(0, 1))     # (2,)
    buf = io.StringIO()
    d = bundle.hyper["embed_dim"]
    header = ["frame_id", "label"] + [f"z{k}" for k in range(int(d))]
    buf.write(",".join(header) + "\n")
    for i, frame in enumerate(dataset.frames):
        z = bundle.encode(frame.amplitude.astype(np.float64))
        _, zq = bundle.quantized(z)
        latent_mean = zq.mean(axis=(0, 1))
        center = dataset.labels[i].joints.mean(axis=0)
        label = (2 if center[0] >= mean_pose[0] else 0) + (1 if center[1] >= mean_pose[1] else 0)
        row = [str(frame.frame_id), str(label)] + [f"{v:.9g}" for v in latent_mean]
        buf.write(",".join(row) + "\n")
    text = buf.getvalue()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return len(dataset.frames)
