"""Write the desk-scale MNIST subset used by the learning acceptance check.

Source: the 5,000-sample MNIST extract shipped inside the ``mlxtend`` wheel
(``mlxtend/data/data/mnist_5k.csv.gz``, 500 digits per class). The rows are
shuffled with a fixed seed and split into 2,000 training and 3,000 test
images, each stored as a gzipped IDX image/label pair.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist_subset
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from asafl.data import Dataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", help="path to an mlxtend wheel")
    parser.add_argument("out", help="output directory")
    parser.add_argument("--n-train", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    raw = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER)).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",")
    order = np.random.default_rng(args.seed).permutation(len(table))
    table = table[order]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": table[: args.n_train], "test": table[args.n_train:]}
    for name, rows in splits.items():
        dataset = Dataset(rows[:, :-1] / 255.0, rows[:, -1].astype(int), 10)
        write_idx(dataset, out / f"{name}-images-idx3-ubyte.gz", out / f"{name}-labels-idx1-ubyte.gz",
                  compress=True)
        print(name, len(dataset), np.bincount(dataset.labels, minlength=10).tolist())


if __name__ == "__main__":
    main()
