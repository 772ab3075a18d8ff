"""Synthetic CSI generation against a direct-summation oracle, label
learnability, and dataset persistence."""

import cmath

import numpy as np
import pytest

from tinysense import data, metrics, storage


def static_scene(paths=1, amplitudes=None, phases=None, delays=None, c_dim=3,
                 t_dim=16, joints=8):
    """Scene with zeroed couplings so path parameters stay constant."""
    return data.MultipathScene(
        amplitudes=np.asarray(amplitudes if amplitudes is not None else [1.0] * paths,
                              dtype=float),
        phases=np.asarray(phases if phases is not None else [0.0] * paths, dtype=float),
        delays_s=np.asarray(delays if delays is not None else [0.0] * paths,
                            dtype=float),
        channel_phase=np.zeros((paths, c_dim)),
        amp_coupling=np.zeros((paths, 2)),
        phase_coupling=np.zeros((paths, 2)),
        delay_coupling=np.zeros((paths, 2)),
        pose_origin=np.full((joints, 2), 0.5),
        pose_gain=np.zeros((joints, 2, 2)),
        latent=np.zeros((t_dim, 2)),
    )


def oracle_frame(scene, f_dim, t_dim, c_dim):
    """Per-(f,t,c) direct summation with scalar complex math."""
    amp, phase, delay = data.path_modulations(scene)
    out = np.zeros((f_dim, t_dim, c_dim))
    for f in range(f_dim):
        freq = f * scene.subcarrier_spacing_hz
        for t in range(t_dim):
            for c in range(c_dim):
                h = 0 + 0j
                for l in range(scene.paths):
                    theta = (phase[t, l] + scene.channel_phase[l, c]
                             - 2.0 * np.pi * freq * delay[t, l])
                    h += amp[t, l] * cmath.exp(1j * theta)
                out[f, t, c] = abs(h)
    return out


class TestSynthFrame:
    def test_single_static_path_is_flat(self):
        frame, label = data.synth_frame(static_scene(), 8, 16, 3)
        assert np.allclose(frame.amplitude, 1.0, atol=1e-12)
        assert label.joints.shape == (8, 2)

    def test_destructive_interference(self):
        scene = static_scene(paths=2, amplitudes=[1.0, 1.0], phases=[0.0, np.pi],
                             delays=[0.0, 0.0])
        frame, _ = data.synth_frame(scene, 8, 16, 3)
        assert np.abs(frame.amplitude).max() < 1e-12

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        scene = data.random_scene(seed=3, paths=3, c_dim=2, t_dim=12)
        scene = scene.with_latent(data.smooth_trajectory(rng, 12, 2))
        frame, _ = data.synth_frame(scene, 6, 12, 2)
        want = oracle_frame(scene, 6, 12, 2)
        assert np.abs(frame.amplitude.astype(np.float64) - want).max() < 1e-6
        # float32 storage is the only loss; compare against f32 cast exactly
        assert np.array_equal(frame.amplitude, want.astype(np.float32))

    def test_deterministic_in_scene_and_seed(self):
        scene = data.random_scene(seed=9, t_dim=16)
        scene = scene.with_latent(
            data.smooth_trajectory(np.random.default_rng(4), 16, 2))
        a, la = data.synth_frame(scene, 8, 16, 3, seed=5, noise_std=0.05)
        b, lb = data.synth_frame(scene, 8, 16, 3, seed=5, noise_std=0.05)
        assert np.array_equal(a.amplitude, b.amplitude)
        assert np.array_equal(la.joints, lb.joints)
        c, _ = data.synth_frame(scene, 8, 16, 3, seed=6, noise_std=0.05)
        assert not np.array_equal(a.amplitude, c.amplitude)

    def test_bad_dims_rejected(self):
        with pytest.raises(ValueError):
            data.synth_frame(static_scene(), 0, 16, 3)

    def test_scene_invariants(self):
        with pytest.raises(ValueError, match="ascending"):
            data.MultipathScene(
                amplitudes=np.array([1.0, 1.0]), phases=np.zeros(2),
                delays_s=np.array([2e-9, 1e-9]), channel_phase=np.zeros((2, 3)),
                amp_coupling=np.zeros((2, 2)), phase_coupling=np.zeros((2, 2)),
                delay_coupling=np.zeros((2, 2)), pose_origin=np.zeros((8, 2)),
                pose_gain=np.zeros((8, 2, 2)), latent=np.zeros((4, 2)))


class TestDataset:
    def test_shapes_and_split(self):
        ds = data.make_dataset(20, 16, 32, 2, seed=1, train_frac=0.8)
        assert len(ds) == 20
        assert ds.frames[0].amplitude.shape == (16, 32, 2)
        assert len(ds.train_idx) == 16 and len(ds.test_idx) == 4
        assert not np.intersect1d(ds.train_idx, ds.test_idx).size

    def test_deterministic(self):
        a = data.make_dataset(6, 16, 32, 2, seed=7)
        b = data.make_dataset(6, 16, 32, 2, seed=7)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.amplitude, fb.amplitude)

    def test_labels_in_unit_square(self):
        ds = data.make_dataset(30, 16, 32, 2, seed=3)
        joints = ds.joints()
        assert joints.min() >= 0.0 and joints.max() <= 1.0

    def test_labels_linearly_learnable_from_csi(self):
        # information-bearing check: ridge from raw CSI beats the mean pose
        # (single scene: one fringe geometry, so a global linear map applies)
        ds = data.make_dataset(160, 16, 32, 2, seed=11, scenes=1)
        x_tr = ds.amplitudes(ds.train_idx).reshape(len(ds.train_idx), -1)
        x_te = ds.amplitudes(ds.test_idx).reshape(len(ds.test_idx), -1)
        y_tr = ds.joints(ds.train_idx)
        y_te = ds.joints(ds.test_idx)

        mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-9
        a_tr = np.hstack([(x_tr - mu) / sd, np.ones((len(x_tr), 1))])
        a_te = np.hstack([(x_te - mu) / sd, np.ones((len(x_te), 1))])
        w = np.linalg.solve(a_tr.T @ a_tr + 1e-2 * np.eye(a_tr.shape[1]),
                            a_tr.T @ y_tr.reshape(len(y_tr), -1))
        pred = (a_te @ w).reshape(y_te.shape)

        lin = metrics.mpjpe(pred, y_te)
        mean_baseline = metrics.mpjpe(
            np.broadcast_to(y_tr.mean(axis=0), y_te.shape), y_te)
        assert lin < mean_baseline


class TestPersistence:
    def test_round_trip_field_equality(self, tmp_path):
        ds = data.make_dataset(100, 8, 16, 2, seed=13)
        path = tmp_path / "set.tsds"
        data.save_dataset(ds, path)
        back = data.load_dataset(path)
        assert len(back) == len(ds)
        assert np.array_equal(back.train_idx, ds.train_idx)
        assert np.array_equal(back.test_idx, ds.test_idx)
        for fa, fb, la, lb in zip(ds.frames, back.frames, ds.labels, back.labels):
            assert fa.frame_id == fb.frame_id
            assert fa.sample_rate_hz == fb.sample_rate_hz
            assert np.array_equal(fa.amplitude, fb.amplitude)
            assert np.array_equal(la.joints, lb.joints)

    def test_resave_is_byte_identical(self, tmp_path):
        ds = data.make_dataset(1, 8, 16, 1, seed=2)
        p1, p2 = tmp_path / "a.tsds", tmp_path / "b.tsds"
        data.save_dataset(ds, p1)
        data.save_dataset(data.load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncation_detected(self, tmp_path):
        ds = data.make_dataset(2, 8, 16, 1, seed=2)
        path = tmp_path / "set.tsds"
        data.save_dataset(ds, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(storage.FormatError):
            data.load_dataset(path)

    def test_error_kinds_are_distinct(self, tmp_path):
        ds = data.make_dataset(1, 8, 16, 1, seed=2)
        path = tmp_path / "set.tsds"
        data.save_dataset(ds, path)
        blob = bytearray(path.read_bytes())

        import struct
        import zlib

        def rewrite(mut):
            body = bytearray(blob[:-4])
            mut(body)
            out = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
            path.write_bytes(out)

        rewrite(lambda b: b.__setitem__(slice(0, 4), b"XXXX"))
        with pytest.raises(storage.BadMagicError):
            data.load_dataset(path)

        rewrite(lambda b: b.__setitem__(slice(4, 6), struct.pack("<H", 99)))
        with pytest.raises(storage.VersionError):
            data.load_dataset(path)

        corrupted = bytearray(blob)
        corrupted[10] ^= 0xFF
        path.write_bytes(bytes(corrupted))
        with pytest.raises(storage.CrcError):
            data.load_dataset(path)

    def test_no_partial_object_on_failure(self, tmp_path):
        path = tmp_path / "broken.tsds"
        path.write_bytes(b"TSDS\x01\x00justjunk")
        with pytest.raises(storage.FormatError):
            data.load_dataset(path)
