"""Convert the 10,000-digit MNIST sample shipped in the `mnist` npm package
(MIT, Juan Cazala) into gzip-compressed IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist-10k
"""
import gzip
import json
import os
import random
import struct
import sys


def main(src, out):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        for i in range(0, len(flat), 784):
            images.append(bytes(min(255, max(0, round(v * 255))) for v in flat[i:i + 784]))
            labels.append(digit)
    order = list(range(len(labels)))
    random.Random(0).shuffle(order)
    os.makedirs(out, exist_ok=True)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(order), 28, 28))
        for i in order:
            fh.write(images[i])
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(order)))
        fh.write(bytes(labels[i] for i in order))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
