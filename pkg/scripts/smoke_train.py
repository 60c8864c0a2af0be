"""Desk-scale training run that dumps attention maps at every checkpoint.

Trains the desk configuration for a short schedule, then renders the first
discriminator's attention maps for one image at each saved checkpoint so the
maps can be compared across training by eye.
"""
import argparse
import dataclasses
from pathlib import Path

from attnsr import cli
from attnsr.training import TrainConfig, checkpoint_path, train

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    parser.add_argument("--iterations", type=int, default=400)
    parser.add_argument("--interval", type=int, default=100)
    parser.add_argument("--image", default=str(ROOT / "data" / "mini_hr" / "hr_00_astronaut.png"))
    parser.add_argument("--output-dir", default="runs/smoke")
    args = parser.parse_args()

    out = Path(args.output_dir)
    cfg = dataclasses.replace(TrainConfig.load(args.config), total_iterations=args.iterations,
                              checkpoint_interval=args.interval, output_dir=str(out))
    train(cfg, progress=lambda record, state: print(record) if record["iter"] % 20 == 0 else None)
    for it in range(args.interval, args.iterations + 1, args.interval):
        cli.main(["visualize", "--checkpoint", str(checkpoint_path(out, it)), "--input", args.image,
                  "--what", "attention", "--output-dir", str(out / "attention")])


if __name__ == "__main__":
    main()
