"""Shared fixtures: the synthetic digit dataset and its prepared features."""

import json
import time

import pytest

import synthdigits
from cadet.cli import main


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    synthdigits.write_dataset(out, n_per_class=1000)
    return out


@pytest.fixture(scope="session")
def prepared(dataset_dir, tmp_path_factory):
    """Autoencoder features for the full dataset, plus the prepare wall time."""
    out = tmp_path_factory.mktemp("prep")
    cfg = {
        "data": {
            "idx_images": str(dataset_dir / "images.idx"),
            "idx_labels": str(dataset_dir / "labels.idx"),
        },
        "schedule": {"batches": [[0, 1], [2, 3], [4, 5], [6, 7]], "aux_classes": [8, 9]},
        "autoencoder": {"latent_dim": 4, "hidden_widths": [32],
                        "activation": ["tanh", "linear", "tanh"],
                        "epochs": 250, "lr": 0.002, "seed": 0},
        "split": {"train_fraction": 0.8, "seed": 5},
        "output_dir": str(out),
    }
    cfg_path = out / "prepare.json"
    cfg_path.write_text(json.dumps(cfg))
    start = time.monotonic()
    assert main(["prepare", "--config", str(cfg_path)]) == 0
    elapsed = time.monotonic() - start
    return {"features_csv": out / "features.csv", "prepare_seconds": elapsed}
