"""Metric values against brute-force oracles, invariances, and the
embedding dump schema."""

import numpy as np
import pytest

from tinysense import data, metrics, models
from tinysense.config import RunConfig


class TestNmse:
    def test_perfect_reconstruction_floor(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        assert metrics.nmse_db(x, x) == metrics.NMSE_FLOOR_DB

    def test_zero_prediction_is_zero_db(self):
        x = np.random.default_rng(1).normal(size=(8, 8))
        assert metrics.nmse_db(x, np.zeros_like(x)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        num = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel()))
        den = sum(a ** 2 for a in x.ravel())
        want = 10 * np.log10(num / den)
        assert metrics.nmse_db(x, y) == pytest.approx(want, abs=1e-9)

    def test_zero_reference_rejected(self):
        with pytest.raises(metrics.MetricError):
            metrics.nmse_db(np.zeros((2, 2)), np.ones((2, 2)))

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        for c in (0.01, 3.7, 1000.0):
            assert metrics.nmse_db(c * x, c * y) == pytest.approx(
                metrics.nmse_db(x, y), abs=1e-9)


class TestPose:
    def test_exact_pose(self):
        y = np.random.default_rng(0).uniform(size=(8, 2))
        assert metrics.mpjpe(y, y) == 0.0
        for a in (5.0, 20.0, 50.0):
            assert metrics.pck(y, y, a) == 100.0

    def test_boundary_is_inclusive(self):
        y = np.array([[0.0, 0.0], [1.0, 1.0]])  # diagonal sqrt(2)
        a = 20.0
        off = (a / 100.0) * np.sqrt(2.0)
        y_hat = y.copy()
        y_hat[0, 0] += off  # exactly at the threshold
        assert metrics.pck(y_hat, y, a) == 100.0
        y_hat[0, 0] += 1e-9
        assert metrics.pck(y_hat, y, a) == 50.0

    def test_match_bruteforce(self):
        rng = np.random.default_rng(4)
        y = rng.uniform(size=(10, 8, 2))
        y_hat = y + rng.normal(0, 0.05, size=y.shape)
        # mpjpe oracle
        want = np.mean([np.sqrt(((y_hat[i, j] - y[i, j]) ** 2).sum())
                        for i in range(10) for j in range(8)])
        assert metrics.mpjpe(y_hat, y) == pytest.approx(want, abs=1e-12)
        # pck oracle
        a = 20.0
        hits = 0
        for i in range(10):
            span = y[i].max(axis=0) - y[i].min(axis=0)
            diag = np.sqrt((span ** 2).sum())
            for j in range(8):
                err = np.sqrt(((y_hat[i, j] - y[i, j]) ** 2).sum())
                hits += err <= a / 100.0 * diag
        assert metrics.pck(y_hat, y, a) == pytest.approx(100.0 * hits / 80)

    def test_degenerate_bbox_rejected(self):
        y = np.full((8, 2), 0.5)
        with pytest.raises(metrics.MetricError, match="degenerate"):
            metrics.pck(y, y, 20.0)

    def test_pck_monotone_in_noise(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(size=(40, 8, 2))
        vals = []
        for sigma in (0.0, 0.02, 0.08, 0.3):
            noisy = y + rng.normal(0, sigma, size=y.shape)
            vals.append(metrics.pck(noisy, y, 20.0))
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestReports:
    def test_text_and_csv_format(self):
        rep = metrics.EvalReport(nmse_db=-12.5, pck={20.0: 61.25, 30.0: 80.0},
                                 mpjpe=0.08, eta=192.0, frames_evaluated=52)
        text = metrics.format_report(rep)
        assert "nmse_db = -12.5000" in text
        assert "pck_20 = 61.25" in text
        csv = metrics.report_csv(rep)
        head, row = csv.strip().split("\n")
        assert head.split(",")[0] == "frames_evaluated"
        assert row.split(",")[0] == "52"

    def test_invalid_report_rejected(self):
        with pytest.raises(metrics.MetricError):
            metrics.EvalReport(nmse_db=0.0, pck={20.0: 140.0}, mpjpe=0.0,
                               eta=1.0, frames_evaluated=1)
        with pytest.raises(metrics.MetricError):
            metrics.EvalReport(nmse_db=0.0, pck={}, mpjpe=0.0, eta=1.0,
                               frames_evaluated=0)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    cfg = RunConfig(n_frames=3, f_dim=16, t_dim=32, c_dim=2, codebook_size=16,
                    embed_dim=8, epochs=1, batch_size=4, est_refine_epochs=0)
    ds = data.make_dataset(3, 16, 32, 2, seed=0, scenes=1)
    bundle = models.build_bundle(cfg, seed=0)
    return ds, bundle, tmp_path_factory.mktemp("emb")


class TestEmbeddingDump:

    def test_row_count_and_schema(self, setup):
        ds, bundle, tmp = setup
        path = tmp / "emb.csv"
        rows = metrics.dump_embeddings(ds, bundle, path)
        lines = path.read_text().strip().split("\n")
        assert rows == 3
        assert len(lines) == 4  # header + one per frame
        header = lines[0].split(",")
        assert header[:2] == ["frame_id", "label"]
        assert len(header) == 2 + 8  # embed_dim columns

    def test_rerun_byte_identical(self, setup):
        ds, bundle, tmp = setup
        p1, p2 = tmp / "a.csv", tmp / "b.csv"
        metrics.dump_embeddings(ds, bundle, p1)
        metrics.dump_embeddings(ds, bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()
