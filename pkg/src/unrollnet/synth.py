"""Synthetic 10-class image set in the CIFAR-10 binary layout.

Ten mirror-symmetric glyph shapes are pasted at random positions over
colored, noisy backgrounds and serialized as 3073-byte records (label
byte + 1024 R + 1024 G + 1024 B). The classes are separable by shape
alone, robust to horizontal flips (all glyphs are left-right
symmetric), and learnable by a small convolutional model in a few
epochs, which makes the files drop-in stand-ins for the real dataset
in tests and desk-scale experiments.
"""

from __future__ import annotations

import os

import numpy as np

RECORD_BYTES = 3073

# 8x8 bitmaps, all symmetric under horizontal mirroring
_GLYPH_ROWS = {
    0: ["........", ".######.", ".#....#.", ".#....#.", ".#....#.", ".#....#.",
        ".######.", "........"],  # ring
    1: ["...##...", "...##...", "...##...", "...##...", "...##...", "...##...",
        "...##...", "...##..."],  # bar
    2: ["#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..",
        ".#....#.", "#......#"],  # cross
    3: ["########", "########", "...##...", "...##...", "...##...", "...##...",
        "...##...", "...##..."],  # tee
    4: ["#......#", "#......#", "#......#", "########", "########", "#......#",
        "#......#", "#......#"],  # aitch
    5: ["#......#", "#......#", ".#....#.", ".#....#.", "..#..#..", "..#..#..",
        "...##...", "...##..."],  # vee
    6: ["...##...", "..####..", ".##..##.", "##....##", "########", "##....##",
        "##....##", "##....##"],  # arch
    7: ["#......#", "#......#", "#......#", "#......#", "#......#", "#......#",
        ".######.", "........"],  # cup
    8: ["...##...", "...##...", "...##...", "########", "########", "...##...",
        "...##...", "...##..."],  # plus
    9: ["...##...", "..####..", ".######.", "########", "########", ".######.",
        "..####..", "...##..."],  # diamond
}


def _glyphs() -> np.ndarray:
    out = np.zeros((10, 8, 8), dtype=np.float32)
    for k, rows in _GLYPH_ROWS.items():
        for i, row in enumerate(rows):
            for j, ch in enumerate(row):
                out[k, i, j] = 1.0 if ch == "#" else 0.0
    return out


_GLYPHS = _glyphs()


def make_images(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n labeled images, uint8 (n, 3, 32, 32), labels uint8 (n,)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    # 2x upscaled glyph masks, 16x16
    big = _GLYPHS.repeat(2, axis=1).repeat(2, axis=2)
    for i in range(n):
        bg = rng.uniform(30, 120, size=3)
        fg = bg + rng.choice([-1, 1]) * rng.uniform(90, 130, size=3)
        img = np.empty((3, 32, 32), dtype=np.float32)
        img[:] = bg[:, None, None]
        # light texture so backgrounds are not constant
        img += rng.normal(0, 6, size=(3, 32, 32))
        oy, ox = rng.integers(0, 17, size=2)
        mask = big[labels[i]]
        region = img[:, oy : oy + 16, ox : ox + 16]
        img[:, oy : oy + 16, ox : ox + 16] = region * (1 - mask) + fg[:, None, None] * mask
        img += rng.normal(0, 4, size=(3, 32, 32))
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels


def write_batch(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Serialize records in the binary batch layout."""
    n = len(labels)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(n, 3072)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def make_dataset(out_dir: str, n_train: int = 4000, n_test: int = 1000,
                 seed: int = 0) -> None:
    """Write data_batch_1.bin and test_batch.bin under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    tr_images, tr_labels = make_images(n_train, seed)
    te_images, te_labels = make_images(n_test, seed + 1)
    write_batch(os.path.join(out_dir, "data_batch_1.bin"), tr_images, tr_labels)
    write_batch(os.path.join(out_dir, "test_batch.bin"), te_images, te_labels)
