"""Write the 5 000-image MNIST subset bundled with mlxtend as IDX files.

Usage: python3 scripts/mnist_subset_to_idx.py OUT_DIR

Keeps 400 train / 100 test images per digit. Point FUNCENT_MNIST_DIR at
OUT_DIR afterwards, or pass --mnist-dir to the CLI.
"""
import sys

from mlxtend.data import mnist_data

from funcent.data import stratified_split, write_mnist_dir


def main(out_dir: str) -> None:
    X, y = mnist_data()
    train, test = stratified_split(X, y, train_per_class=400, seed=0)
    print(write_mnist_dir(train, test, out_dir))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
