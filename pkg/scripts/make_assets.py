"""Regenerate the bundled data files under src/insitu/assets/.

Everything is procedural or derived from sklearn's small digit set, seeded,
so reruns reproduce the committed bytes. Run from the repo root:

    python3 scripts/make_assets.py
"""

import pathlib
import sys

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from insitu import fileio  # noqa: E402

ASSETS = pathlib.Path(__file__).resolve().parents[1] / "src" / "insitu" / "assets"

TRAIN_PER_CLASS = {c: 103 if c < 4 else 102 for c in range(10)}   # 1024 total
TEST_PER_CLASS = {c: 26 if c < 6 else 25 for c in range(10)}      # 256 total


def make_boat(shape=(64, 64)) -> np.ndarray:
    h, w = shape
    rows = np.arange(h)[:, None].astype(float)
    cols = np.arange(w)[None, :].astype(float)
    horizon = 40

    img = np.where(rows < horizon,
                   0.85 - 0.25 * rows / horizon,                    # sky
                   0.30 + 0.05 * np.sin(cols / 3.0) * ((rows - horizon) % 3 == 0))

    sun = (rows - 8) ** 2 + (cols - 52) ** 2 <= 16
    img[sun] = 1.0

    hull = (rows >= 44) & (rows <= 50) & (cols >= 14 + (rows - 44)) & \
           (cols <= 50 - (rows - 44))
    img[hull] = 0.08

    mast = (rows >= 14) & (rows < 44) & (np.abs(cols - 32) <= 0.6)
    img[mast] = 0.15

    main_sail = (rows >= 16) & (rows < 43) & (cols >= 33.5) & \
                (cols <= 33.5 + 0.55 * (rows - 16))
    img[main_sail] = 0.95

    jib = (rows >= 20) & (rows < 43) & (cols <= 30.5) & \
          (cols >= 30.5 - 0.42 * (rows - 20))
    img[jib] = 0.88

    return img.clip(0.0, 1.0)


def make_novel(seed: int, shape=(64, 64)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.uniform(size=shape), sigma=3.0)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def upscale_digit(img8: np.ndarray) -> np.ndarray:
    img = ndimage.zoom(img8 / 16.0, 28 / 8, order=1,
                       mode="grid-constant", grid_mode=True)
    return np.round(255.0 * img.clip(0.0, 1.0)).astype(np.uint8)


def make_digit_sets():
    data = load_digits()
    images = np.stack([upscale_digit(im) for im in data.images])
    labels = data.target.astype(np.int64)

    rng = np.random.default_rng(2024)
    train_idx, test_idx = [], []
    for c in range(10):
        pool = rng.permutation(np.flatnonzero(labels == c))
        n_tr, n_te = TRAIN_PER_CLASS[c], TEST_PER_CLASS[c]
        if len(pool) < n_tr + n_te:
            raise RuntimeError(f"class {c} has only {len(pool)} samples")
        train_idx.extend(pool[:n_tr])
        test_idx.extend(pool[n_tr:n_tr + n_te])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))
    return (images[train_idx], labels[train_idx],
            images[test_idx], labels[test_idx])


def main() -> None:
    ASSETS.mkdir(parents=True, exist_ok=True)

    fileio.write_pgm(ASSETS / "boat.pgm", make_boat())
    for k in range(4):
        fileio.write_pgm(ASSETS / f"novel{k}.pgm", make_novel(100 + k))

    tr_img, tr_lab, te_img, te_lab = make_digit_sets()
    fileio.write_idx_images(ASSETS / "digits-train-images.idx", tr_img)
    fileio.write_idx_labels(ASSETS / "digits-train-labels.idx", tr_lab)
    fileio.write_idx_images(ASSETS / "digits-test-images.idx", te_img)
    fileio.write_idx_labels(ASSETS / "digits-test-labels.idx", te_lab)

    print(f"wrote assets to {ASSETS}")
    print(f"train: {tr_img.shape} labels {np.bincount(tr_lab)}")
    print(f"test:  {te_img.shape} labels {np.bincount(te_lab)}")


if __name__ == "__main__":
    main()
