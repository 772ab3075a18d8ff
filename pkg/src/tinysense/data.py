"""Synthetic multipath CSI frames with paired 2-D pose labels.

A scene is a set of propagation paths (amplitude, phase, delay) plus a
low-dimensional smooth motion latent that modulates the paths over time and
drives the pose keypoints through a fixed affine map.  The per-subcarrier
channel gain is the magnitude of the summed path phasors,

    |H(f, t, c)| = | sum_l  a_l(t) * exp(j * (phi_l(t, c) - 2*pi*f*tau_l(t))) |

evaluated on an F x T x C grid (frequency bins x time steps x channels),
with channel-specific phase offsets.  The same latent value at the window
center produces the frame's pose label, so the CSI carries learnable pose
information by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import storage


@dataclass(frozen=True)
class CsiFrame:
    amplitude: np.ndarray      # (F, T, C) float32 channel gain magnitudes
    frame_id: int
    sample_rate_hz: float

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.amplitude.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class PoseLabel:
    joints: np.ndarray         # (J, 2) float32, normalized scene units in [0, 1]

    @property
    def count(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class MultipathScene:
    """Path parameters, their motion couplings, and one latent trajectory.

    amplitudes/phases/delays_s are the per-path base values (delays sorted
    ascending).  The coupling arrays project the latent onto per-path
    modulations; pose_origin/pose_gain map the latent to joint coordinates.
    latent holds the (T, Q) trajectory for the frame window being rendered.
    """

    amplitudes: np.ndarray        # (L,) >= 0
    phases: np.ndarray            # (L,) in [0, 2*pi)
    delays_s: np.ndarray          # (L,) >= 0, ascending
    channel_phase: np.ndarray     # (L, C) per-channel phase offsets
    amp_coupling: np.ndarray      # (L, Q)
    phase_coupling: np.ndarray    # (L, Q)
    delay_coupling: np.ndarray    # (L, Q)
    pose_origin: np.ndarray       # (J, 2)
    pose_gain: np.ndarray         # (J, 2, Q)
    latent: np.ndarray            # (T, Q) smooth trajectory
    subcarrier_spacing_hz: float = 312.5e3

    def __post_init__(self):
        if self.amplitudes.shape[0] < 1:
            raise ValueError("scene needs at least one path")
        if (self.amplitudes < 0).any():
            raise ValueError("path amplitudes must be >= 0")
        if (self.delays_s < 0).any():
            raise ValueError("path delays must be >= 0")
        if not np.all(np.diff(self.delays_s) >= 0):
            raise ValueError("path delays must be sorted ascending")

    @property
    def paths(self) -> int:
        return self.amplitudes.shape[0]

    def with_latent(self, latent: np.ndarray) -> "MultipathScene":
        return replace(self, latent=np.asarray(latent, dtype=np.float64))


@dataclass
class Dataset:
    frames: list[CsiFrame]
    labels: list[PoseLabel]
    train_idx: np.ndarray      # int32 indices into frames
    test_idx: np.ndarray

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError(f"{len(self.frames)} frames vs {len(self.labels)} labels")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train/test splits overlap")

    def __len__(self) -> int:
        return len(self.frames)

    def amplitudes(self, idx=None) -> np.ndarray:
        """Stack frames (N, F, T, C) as float64."""
        sel = range(len(self.frames)) if idx is None else idx
        return np.stack([self.frames[i].amplitude for i in sel]).astype(np.float64)

    def joints(self, idx=None) -> np.ndarray:
        sel = range(len(self.labels)) if idx is None else idx
        return np.stack([self.labels[i].joints for i in sel]).astype(np.float64)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def path_modulations(scene: MultipathScene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time-varying per-path (amplitude, phase, delay), each (T, L)."""
    m = scene.latent                                   # (T, Q)
    amp = scene.amplitudes[None, :] * (1.0 + 0.5 * np.tanh(m @ scene.amp_coupling.T))
    phase = scene.phases[None, :] + m @ scene.phase_coupling.T
    delay = scene.delays_s[None, :] * (1.0 + 0.25 * np.tanh(m @ scene.delay_coupling.T))
    return amp, phase, delay


def synth_frame(scene: MultipathScene, f_dim: int, t_dim: int, c_dim: int,
                seed: int = 0, frame_id: int = 0, noise_std: float = 0.0,
                sample_rate_hz: float = 500.0) -> tuple[CsiFrame, PoseLabel]:
    """Render one CSI frame and its pose label from a scene.

    Deterministic in (scene, seed); noise_std adds seeded Gaussian
    measurement noise on top of the ideal magnitudes.
    """
    if min(f_dim, t_dim, c_dim) < 1:
        raise ValueError(f"frame dims must be >= 1, got ({f_dim},{t_dim},{c_dim})")
    if scene.latent.shape[0] != t_dim:
        raise ValueError(f"scene latent covers {scene.latent.shape[0]} steps, frame wants {t_dim}")

    amp, phase, delay = path_modulations(scene)        # (T, L) each
    freqs = np.arange(f_dim) * scene.subcarrier_spacing_hz

    h = np.zeros((f_dim, t_dim, c_dim), dtype=np.complex128)
    for l in range(scene.paths):
        theta = (phase[None, :, l, None]
                 + scene.channel_phase[None, None, l, :c_dim]
                 - 2.0 * np.pi * freqs[:, None, None] * delay[None, :, l, None])
        h += amp[None, :, l, None] * np.exp(1j * theta)
    magnitude = np.abs(h)

    if noise_std > 0:
        rng = np.random.default_rng(seed)
        magnitude = np.abs(magnitude + rng.normal(0.0, noise_std, size=magnitude.shape))
    if not np.all(np.isfinite(magnitude)):
        raise FloatingPointError("non-finite amplitude in synthesized frame")

    m_center = scene.latent[t_dim // 2]
    joints = np.clip(scene.pose_origin + scene.pose_gain @ m_center, 0.0, 1.0)

    frame = CsiFrame(amplitude=magnitude.astype(np.float32), frame_id=frame_id,
                     sample_rate_hz=sample_rate_hz)
    return frame, PoseLabel(joints=joints.astype(np.float32))


def random_scene(seed: int, paths: int = 4, c_dim: int = 3, joints: int = 8,
                 latent_dim: int = 2, t_dim: int = 64,
                 max_delay_s: float = 200e-9) -> MultipathScene:
    """Draw a scene whose paths and pose both respond to the motion latent."""
    rng = np.random.default_rng(seed)
    delays = np.sort(rng.uniform(0.0, max_delay_s, size=paths))
    scene = MultipathScene(
        amplitudes=rng.uniform(0.5, 1.5, size=paths),
        phases=rng.uniform(0.0, 2 * np.pi, size=paths),
        delays_s=delays,
        channel_phase=rng.uniform(0.0, 2 * np.pi, size=(paths, c_dim)),
        amp_coupling=rng.normal(0.0, 0.8, size=(paths, latent_dim)),
        phase_coupling=rng.normal(0.0, 1.2, size=(paths, latent_dim)),
        delay_coupling=rng.normal(0.0, 0.8, size=(paths, latent_dim)),
        pose_origin=rng.uniform(0.35, 0.65, size=(joints, 2)),
        pose_gain=rng.normal(0.0, 0.12, size=(joints, 2, latent_dim)),
        latent=np.zeros((t_dim, latent_dim)),
    )
    return scene


def smooth_trajectory(rng: np.random.Generator, t_dim: int, latent_dim: int,
                      harmonics: int = 3) -> np.ndarray:
    """Sum of low-frequency sinusoids: C0-continuous, bounded roughly by +-1.5.

    Frequencies stay below one cycle per window so the latent drifts rather
    than oscillates within a frame; the whole frame then carries evidence
    about the center-step pose.
    """
    t = np.arange(t_dim) / t_dim
    out = np.zeros((t_dim, latent_dim))
    for q in range(latent_dim):
        amps = rng.uniform(0.25, 0.8, size=harmonics)
        freqs = rng.uniform(0.1, 0.7, size=harmonics)
        phases = rng.uniform(0.0, 2 * np.pi, size=harmonics)
        out[:, q] = sum(a * np.sin(2 * np.pi * fr * t + ph)
                        for a, fr, ph in zip(amps, freqs, phases))
    return out


def make_dataset(n_frames: int, f_dim: int = 32, t_dim: int = 64, c_dim: int = 3,
                 joints: int = 8, seed: int = 0, paths: int = 4, scenes: int = 4,
                 noise_std: float = 0.01, train_frac: float = 0.8,
                 sample_rate_hz: float = 500.0) -> Dataset:
    """Several propagation scenes sharing one pose map, a fresh latent
    trajectory per frame.

    Multiple scenes diversify the fringe geometry (frame i uses scene
    i mod scenes) while the shared latent->pose map keeps labels learnable
    across all of them.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    base = random_scene(seed, paths=paths, c_dim=c_dim, joints=joints, t_dim=t_dim)
    scene_list = [base]
    for k in range(1, max(scenes, 1)):
        alt = random_scene(seed + 7700 * k, paths=paths, c_dim=c_dim,
                           joints=joints, t_dim=t_dim)
        scene_list.append(replace(alt, pose_origin=base.pose_origin,
                                  pose_gain=base.pose_gain))

    rng = np.random.default_rng(seed + 1)
    frames, labels = [], []
    for i in range(n_frames):
        scene = scene_list[i % len(scene_list)]
        traj = smooth_trajectory(rng, t_dim, scene.latent.shape[1])
        frame, label = synth_frame(scene.with_latent(traj), f_dim, t_dim, c_dim,
                                   seed=seed + 1000 + i, frame_id=i,
                                   noise_std=noise_std, sample_rate_hz=sample_rate_hz)
        frames.append(frame)
        labels.append(label)

    n_train = int(round(train_frac * n_frames))
    perm = np.random.default_rng(seed + 2).permutation(n_frames)
    return Dataset(frames=frames, labels=labels,
                   train_idx=np.sort(perm[:n_train]).astype(np.int32),
                   test_idx=np.sort(perm[n_train:]).astype(np.int32))


# ---------------------------------------------------------------------------
# persistence (.tsds)
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    f_dim, t_dim, c_dim = ds.frames[0].shape
    j = ds.labels[0].count
    w = storage.Writer(storage.MAGIC_DATASET, storage.DATASET_VERSION)
    w.u32(len(ds.frames))
    w.u32(f_dim)
    w.u32(t_dim)
    w.u32(c_dim)
    w.u32(j)
    w.f32(ds.frames[0].sample_rate_hz)
    w.u32(len(ds.train_idx))
    w.u32(len(ds.test_idx))
    w.raw(np.ascontiguousarray(ds.train_idx, dtype="<i4").tobytes())
    w.raw(np.ascontiguousarray(ds.test_idx, dtype="<i4").tobytes())
    for frame, label in zip(ds.frames, ds.labels):
        if frame.shape != (f_dim, t_dim, c_dim) or label.count != j:
            raise ValueError("all frames/labels in a dataset must share one shape")
        w.u32(frame.frame_id)
        w.raw(np.ascontiguousarray(frame.amplitude, dtype="<f4").tobytes())
        w.raw(np.ascontiguousarray(label.joints, dtype="<f4").tobytes())
    storage.write_file(path, w.finish())


def load_dataset(path) -> Dataset:
    r = storage.read_file(path, storage.MAGIC_DATASET, storage.DATASET_VERSION)
    n = r.u32()
    f_dim, t_dim, c_dim, j = r.u32(), r.u32(), r.u32(), r.u32()
    rate = r.f32()
    n_train, n_test = r.u32(), r.u32()
    train_idx = np.frombuffer(r.raw(n_train * 4), dtype="<i4").copy()
    test_idx = np.frombuffer(r.raw(n_test * 4), dtype="<i4").copy()
    frames, labels = [], []
    for _ in range(n):
        fid = r.u32()
        amp = np.frombuffer(r.raw(f_dim * t_dim * c_dim * 4), dtype="<f4")
        joints = np.frombuffer(r.raw(j * 2 * 4), dtype="<f4")
        frames.append(CsiFrame(amplitude=amp.reshape(f_dim, t_dim, c_dim).copy(),
                               frame_id=fid, sample_rate_hz=rate))
        labels.append(PoseLabel(joints=joints.reshape(j, 2).copy()))
    r.done()
    return Dataset(frames=frames, labels=labels, train_idx=train_idx, test_idx=test_idx)
