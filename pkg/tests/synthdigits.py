"""Deterministic MNIST-shaped synthetic digits with a 4-dim latent structure.

Each class is a corner of a scaled 4-cube; a sample's latent code is its
class corner plus isotropic Gaussian scatter. The code drives the mean
intensity of the four 14x14 quadrants of a 28x28 image, plus per-pixel
noise. An autoencoder therefore has a genuine 4-dimensional representation
to discover, and classes are well-separated clusters in that latent space.

The baseline pair {0, 1} spans all four coordinates, every later pair is
antipodal, and the auxiliary pair {8, 9} sits closer to the baseline than
the later pairs do, which mirrors the "auxiliary OOD resembles future new
classes" premise the detector relies on.

Run as a script to materialize IDX files for the CLI walkthrough:

    python tests/synthdigits.py --out demo_data
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from cadet.data import write_idx

SIDE = 28
CODE_SCALE = 0.5
CLASS_CODES = {
    0: (+1, +1, +1, +1),
    1: (-1, -1, -1, -1),
    2: (+1, +1, -1, -1),
    3: (-1, -1, +1, +1),
    4: (+1, -1, +1, -1),
    5: (-1, +1, -1, +1),
    6: (+1, -1, -1, +1),
    7: (-1, +1, +1, -1),
    8: (+1, +1, +1, -1),
    9: (-1, -1, -1, +1),
}


def _quadrant_masks() -> np.ndarray:
    masks = np.zeros((4, SIDE, SIDE))
    half = SIDE // 2
    masks[0, :half, :half] = 1.0
    masks[1, :half, half:] = 1.0
    masks[2, half:, :half] = 1.0
    masks[3, half:, half:] = 1.0
    return masks.reshape(4, SIDE * SIDE)


def make_dataset(
    n_per_class: int = 1000,
    seed: int = 20260808,
    sigma: float = 0.28,
    amp: float = 0.3,
    pixel_noise: float = 0.05,
):
    """Returns (pixels uint8 (N, 28, 28), labels uint8 (N,)), shuffled."""
    masks = _quadrant_masks()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    images = []
    labels = []
    for c in sorted(CLASS_CODES):
        codes = CODE_SCALE * np.array(CLASS_CODES[c], dtype=np.float64)
        z = codes + rng.normal(0.0, sigma, size=(n_per_class, 4))
        z = np.clip(z, -1.5, 1.5)
        flat = 0.5 + amp * (z @ masks)
        flat += rng.normal(0.0, pixel_noise, size=flat.shape)
        images.append(np.clip(flat, 0.0, 1.0))
        labels.extend([c] * n_per_class)
    X = np.concatenate(images)
    y = np.array(labels, dtype=np.uint8)
    order = rng.permutation(len(y))
    pixels = np.round(X[order] * 255.0).astype(np.uint8).reshape(-1, SIDE, SIDE)
    return pixels, y[order]


def write_dataset(out_dir, n_per_class: int = 1000, seed: int = 20260808):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pixels, labels = make_dataset(n_per_class=n_per_class, seed=seed)
    images_path = out / "images.idx"
    labels_path = out / "labels.idx"
    write_idx(images_path, labels_path, pixels, labels)
    return images_path, labels_path


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_data")
    parser.add_argument("--n-per-class", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=20260808)
    args = parser.parse_args()
    images, labels = write_dataset(args.out, args.n_per_class, args.seed)
    print(f"wrote {images} and {labels}")


if __name__ == "__main__":
    main()
