"""Refit the bundled NIQE pristine model from a directory of clean images."""
import argparse

from attnsr.niqe import DEFAULT_RIDGE, default_model_path, fit_pristine_model


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus", default="data/mini_hr")
    parser.add_argument("--output", default=str(default_model_path()))
    parser.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    args = parser.parse_args()
    model = fit_pristine_model(args.corpus, ridge=args.ridge)
    model.save(args.output)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
