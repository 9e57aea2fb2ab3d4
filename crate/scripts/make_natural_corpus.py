"""Cut 256x256 grayscale crops from the sample photographs bundled with
scikit-image and scikit-learn into crates/core/tests/data/natural/."""

import pathlib

import numpy as np
from PIL import Image
from skimage import color, data
from sklearn.datasets import load_sample_images

SIZE = 256
OUT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data" / "natural"

SKIMAGE = ["camera", "astronaut", "coffee", "chelsea", "rocket", "coins", "moon", "page", "text", "brick", "grass", "gravel", "immunohistochemistry", "hubble_deep_field", "retina"]


def gray(img):
    img = np.asarray(img)
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3])
    img = img.astype(np.float64)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else img * 0.0


def sources():
    for name in SKIMAGE:
        try:
            yield name, gray(getattr(data, name)())
        except Exception as exc:  # some images need a download
            print(f"skip {name}: {exc}")
    for i, img in enumerate(load_sample_images().images):
        yield f"sklearn{i}", gray(img)


def crops(img, rng, count):
    h, w = img.shape
    if h < SIZE or w < SIZE:
        return
    for _ in range(count):
        y = rng.integers(0, h - SIZE + 1)
        x = rng.integers(0, w - SIZE + 1)
        yield img[y : y + SIZE, x : x + SIZE]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    n = 0
    for name, img in sources():
        per = 6 if max(img.shape) >= 600 else 3
        for j, c in enumerate(crops(img, rng, per)):
            if c.std() < 0.02:
                continue
            Image.fromarray((c * 255).round().astype(np.uint8)).save(OUT / f"{name}_{j}.png")
            n += 1
    print(f"wrote {n} crops to {OUT}")


if __name__ == "__main__":
    main()
