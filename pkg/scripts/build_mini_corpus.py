"""Rebuild the bundled 20-image HR corpus in data/mini_hr/.

Sources are the sample photographs shipped inside scikit-image, scikit-learn
and matplotlib, so the corpus can be regenerated offline. Each source is
downscaled with a Lanczos filter (this also suppresses JPEG blocking in the
.jpg sources) and cut into fixed 256x256 crops.
"""
import argparse
import os
from pathlib import Path

import matplotlib
import skimage.data
import sklearn.datasets
from PIL import Image

SIZE = 256

SKIMAGE = Path(os.path.dirname(skimage.data.__file__))
SKLEARN = Path(os.path.dirname(sklearn.datasets.__file__)) / "images"
MPL = Path(matplotlib.get_data_path()) / "sample_data"

# (source path, short side after downscale, list of crop origins (x, y))
SOURCES = [
    (SKIMAGE / "astronaut.png", 512, [(0, 0), (256, 256)]),
    (SKIMAGE / "chelsea.png", 300, [(60, 20)]),
    (SKIMAGE / "coffee.png", 400, [(40, 60), (300, 100)]),
    (SKIMAGE / "rocket.jpg", 320, [(20, 30), (200, 40)]),
    (SKIMAGE / "motorcycle_left.png", 380, [(40, 60), (280, 100)]),
    (SKIMAGE / "motorcycle_right.png", 300, [(100, 20)]),
    (SKIMAGE / "camera.png", 384, [(60, 30)]),
    (SKIMAGE / "gravel.png", 384, [(64, 64)]),
    (SKIMAGE / "brick.png", 384, [(64, 64)]),
    (SKIMAGE / "hubble_deep_field.jpg", 400, [(100, 80)]),
    (MPL / "grace_hopper.jpg", 300, [(10, 20), (20, 100)]),
    (SKLEARN / "china.jpg", 300, [(40, 20), (180, 40)]),
    (SKLEARN / "flower.jpg", 300, [(60, 30), (170, 30)]),
]


def build(out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    index = 0
    for src, short, origins in SOURCES:
        im = Image.open(src).convert("RGB")
        w, h = im.size
        factor = short / min(w, h)
        im = im.resize((round(w * factor), round(h * factor)), Image.LANCZOS)
        for x, y in origins:
            crop = im.crop((x, y, x + SIZE, y + SIZE))
            assert crop.size == (SIZE, SIZE), (src, crop.size)
            path = out_dir / f"hr_{index:02d}_{src.stem}.png"
            crop.save(path)
            written.append(path)
            index += 1
    return written


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mini_hr"))
    args = parser.parse_args()
    paths = build(Path(args.out))
    print(f"wrote {len(paths)} images to {args.out}")
