"""Session-scoped artifacts shared by the acceptance suite and CLI tests.

The trained compression model and recovery transformer are expensive
(minutes); they are built once per session at the acceptance operating
point and reused everywhere a trained model is needed.
"""

import numpy as np
import pytest

from tinysense import data, models, recovery
from tinysense.config import RunConfig

ACC_SEED = 0


def acceptance_config() -> RunConfig:
    """The acceptance operating point: 256 frames of 32x64x3, D=16, S=256,
    50 epochs.  Optimizer/batch are free desk-scale knobs; adam converges
    within the epoch budget where plain momentum SGD does not."""
    return RunConfig(n_frames=256, f_dim=32, t_dim=64, c_dim=3, embed_dim=16,
                     codebook_size=256, epochs=50, optimizer="adam",
                     batch_size=16, seed=ACC_SEED)


@pytest.fixture(scope="session")
def acc_cfg():
    return acceptance_config()


@pytest.fixture(scope="session")
def acc_dataset(acc_cfg):
    return data.make_dataset(acc_cfg.n_frames, acc_cfg.f_dim, acc_cfg.t_dim,
                             acc_cfg.c_dim, joints=acc_cfg.joints, seed=ACC_SEED,
                             paths=acc_cfg.paths, scenes=acc_cfg.scenes,
                             noise_std=acc_cfg.noise_std,
                             train_frac=acc_cfg.train_frac)


@pytest.fixture(scope="session")
def acc_training(acc_dataset, acc_cfg):
    """(bundle, reports, wall_seconds) for the acceptance training run."""
    import time
    t0 = time.monotonic()
    bundle, reports = models.train(acc_dataset, acc_cfg, seed=ACC_SEED)
    return bundle, reports, time.monotonic() - t0


@pytest.fixture(scope="session")
def acc_bundle(acc_training):
    return acc_training[0]


@pytest.fixture(scope="session")
def acc_index_maps(acc_dataset, acc_bundle):
    """(train_maps, test_maps) quantized with the trained codebook."""
    def maps_for(idx):
        out = []
        for i in idx:
            z = acc_bundle.encode(acc_dataset.frames[i].amplitude.astype(np.float64))
            imap, _ = acc_bundle.quantized(z, frame_id=int(i))
            out.append(imap)
        return out
    return maps_for(acc_dataset.train_idx), maps_for(acc_dataset.test_idx)


@pytest.fixture(scope="session")
def acc_recovery(acc_bundle, acc_index_maps, acc_cfg):
    """The bundle with a trained lost-index transformer attached."""
    train_maps, _ = acc_index_maps
    acc_bundle.transformer = recovery.train_transformer(
        train_maps, acc_cfg, seed=ACC_SEED, vocab_size=acc_bundle.codebook.size)
    return acc_bundle


@pytest.fixture(scope="session")
def saved_artifacts(tmp_path_factory, acc_dataset, acc_recovery):
    """Dataset and trained model (with transformer) on disk for CLI tests."""
    root = tmp_path_factory.mktemp("artifacts")
    ds_path = root / "data.tsds"
    model_path = root / "model.tsmd"
    data.save_dataset(acc_dataset, ds_path)
    models.save_model(acc_recovery, model_path)
    return {"dataset": ds_path, "model": model_path, "root": root}
