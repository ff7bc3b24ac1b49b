"""
Data Setup Script

This script initializes a synthetic stand-in dataset in the split layout
expected by the training and evaluation commands, so the smoke preset can
run without the clinical images.
"""

import argparse
from pathlib import Path

from src.data_loader import describe_dataset, load_dataset
from src.synthetic_data import write_synthetic_dataset


def create_synthetic_dataset(root: Path, train: int, val: int, test: int, size: int, seed: int):
    """
    Write the synthetic dataset and print a short summary per split.

    Args:
        root (Path): Dataset root
        train (int): Training samples
        val (int): Validation samples
        test (int): Test samples
        size (int): Image side length
        seed (int): Random seed
    """
    print(f"Creating synthetic dataset in {root}...")
    counts = write_synthetic_dataset(
        root, counts={"train": train, "val": val, "test": test}, size=size, seed=seed,
    )

    for split, count in counts.items():
        summary = describe_dataset(load_dataset(root, split, input_size=size))
        print(f"  {split}: {count} samples, severity levels {summary['severity_levels']}")


def main():
    """
    Main setup function.
    """
    parser = argparse.ArgumentParser(description="Write a synthetic plaque segmentation dataset")
    parser.add_argument("--root", default="./data/synthetic")
    parser.add_argument("--train", type=int, default=8)
    parser.add_argument("--val", type=int, default=2)
    parser.add_argument("--test", type=int, default=2)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    print("Plaque Segmentation - Data Setup")
    print("=" * 80)
    print()

    create_synthetic_dataset(Path(args.root), args.train, args.val, args.test, args.size, args.seed)

    print("\n" + "=" * 80)
    print("Setup complete!")
    print("\nNext steps:")
    print(f"1. Run 'python main.py check --config smoke --root {args.root}' to verify configuration")
    print("2. Run 'python main.py train --config smoke' for a short training run")
    print("3. Run 'python main.py evaluate --checkpoint runs/smoke/best' to score it")


if __name__ == "__main__":
    main()
