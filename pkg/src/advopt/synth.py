"""Synthetic handwritten-digit stand-in corpus in IDX format.

Renders seven-segment-style glyphs for the digits 0-9 with randomized
position, stroke thickness, intensity and pixel noise, then quantizes
to the byte grid so that IDX round-trips are exact.  Useful when no
real digit corpus is available; any directory of IDX files with the
conventional names works interchangeably.

Generate a corpus directory with::

    python -m advopt.synth --out data/ --train 6000 --test 1000 --seed 0
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import Dataset, save_idx, TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS

SIDE = 28

# segment endpoints in a unit box: the classic seven-segment layout
_SEGMENTS = {
    "A": ((0.18, 0.10), (0.82, 0.10)),
    "B": ((0.82, 0.10), (0.82, 0.50)),
    "C": ((0.82, 0.50), (0.82, 0.90)),
    "D": ((0.18, 0.90), (0.82, 0.90)),
    "E": ((0.18, 0.50), (0.18, 0.90)),
    "F": ((0.18, 0.10), (0.18, 0.50)),
    "G": ((0.18, 0.50), (0.82, 0.50)),
}

_DIGITS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGECD",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCFGD",
}

# box placed inside the 28x28 canvas: (row0, row1, col0, col1)
_BOX = (5.0, 23.0, 8.0, 20.0)


def _render_glyph(digit: int, sigma: float) -> np.ndarray:
    """Rasterize one digit at a given stroke width, normalized to peak 1."""
    r0, r1, c0, c1 = _BOX
    rows = np.arange(SIDE)[:, None]
    cols = np.arange(SIDE)[None, :]
    img = np.zeros((SIDE, SIDE))
    for seg in _DIGITS[digit]:
        (x0, y0), (x1, y1) = _SEGMENTS[seg]
        p0 = np.array([r0 + y0 * (r1 - r0), c0 + x0 * (c1 - c0)])
        p1 = np.array([r0 + y1 * (r1 - r0), c0 + x1 * (c1 - c0)])
        for t in np.linspace(0.0, 1.0, 24):
            cr, cc = p0 + t * (p1 - p0)
            img = np.maximum(img, np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * sigma**2)))
    return img / img.max()


_GLYPH_SIGMAS = (0.7, 1.0)


def glyph_bank() -> np.ndarray:
    """Pre-rendered glyphs, shape ``[10, len(_GLYPH_SIGMAS), 28, 28]``."""
    return np.array([[_render_glyph(d, s) for s in _GLYPH_SIGMAS] for d in range(10)])


def make_dataset(n: int, seed) -> Dataset:
    """``n`` randomized glyph samples, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    bank = glyph_bank()
    labels = rng.integers(0, 10, size=n)
    variants = rng.integers(0, bank.shape[1], size=n)
    shifts_r = rng.integers(-2, 3, size=n)
    shifts_c = rng.integers(-3, 4, size=n)
    # strokes stay near saturation so classes remain separable even under
    # substantial per-pixel perturbations
    intensity = rng.uniform(0.94, 1.0, size=n)
    noise = rng.uniform(0.0, 0.04, size=(n, SIDE, SIDE))
    images = np.empty((n, 1, SIDE, SIDE))
    for i in range(n):
        g = bank[labels[i], variants[i]]
        g = np.roll(g, (shifts_r[i], shifts_c[i]), axis=(0, 1))
        img = np.clip(g * intensity[i] + noise[i], 0.0, 1.0)
        images[i, 0] = np.rint(img * 255.0) / 255.0
    return Dataset(images, labels.astype(np.int64))


def write_corpus(out_dir, n_train: int, n_test: int, seed) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = make_dataset(n_train, (seed, 0))
    test = make_dataset(n_test, (seed, 1))
    save_idx(train, out / TRAIN_IMAGES, out / TRAIN_LABELS)
    save_idx(test, out / TEST_IMAGES, out / TEST_LABELS)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a synthetic digit corpus in IDX format")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--train", type=int, default=6000, help="training examples")
    parser.add_argument("--test", type=int, default=1000, help="test examples")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    write_corpus(args.out, args.train, args.test, args.seed)
    print(f"wrote {args.train}+{args.test} examples to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
