#!/usr/bin/env python3
# Copyright 2026 The e2d Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Build gzipped IDX files from the 10k MNIST digits in the npm `mnist` package.

The npm package stores each digit as 784 values v/255 rounded to three
decimals, so round(v * 255) recovers the original 8-bit pixel exactly.

Per class, the first 80% of digits go to the train split, the rest to test.

    npm pack mnist@1.1.0
    python3 tools/make_mnist_subset.py mnist-1.1.0.tgz data/mnist
"""

import argparse
import gzip
import json
import os
import struct
import tarfile

SIDE = 28
PIXELS = SIDE * SIDE


def load_digits(tgz_path):
    per_class = []
    with tarfile.open(tgz_path, "r:gz") as tar:
        for label in range(10):
            member = tar.extractfile(f"package/src/digits/{label}.json")
            values = json.load(member)["data"]
            count = len(values) // PIXELS
            images = []
            for i in range(count):
                chunk = values[i * PIXELS:(i + 1) * PIXELS]
                pixels = bytes(int(round(v * 255.0)) for v in chunk)
                assert all(abs(p / 255.0 - v) < 6e-4 for p, v in zip(pixels, chunk))
                images.append(pixels)
            per_class.append(images)
    return per_class


def interleave(per_class_lists):
    # Round-robin over classes so that splits are not sorted by label.
    out = []
    cursors = [0] * len(per_class_lists)
    remaining = sum(len(c) for c in per_class_lists)
    while remaining:
        for label, items in enumerate(per_class_lists):
            if cursors[label] < len(items):
                out.append((items[cursors[label]], label))
                cursors[label] += 1
                remaining -= 1
    return out


def write_idx(prefix, records):
    images = gzip.GzipFile(prefix + "-images-idx3-ubyte.gz", "wb", mtime=0)
    labels = gzip.GzipFile(prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0)
    with images, labels:
        images.write(struct.pack(">IIII", 0x00000803, len(records), SIDE, SIDE))
        labels.write(struct.pack(">II", 0x00000801, len(records)))
        for pixels, label in records:
            images.write(pixels)
            labels.write(bytes([label]))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("package", help="path to mnist-1.1.0.tgz")
    parser.add_argument("out_dir")
    parser.add_argument("--train-fraction", type=float, default=0.8)
    args = parser.parse_args()

    per_class = load_digits(args.package)
    train, test = [], []
    for images in per_class:
        cut = int(len(images) * args.train_fraction)
        train.append(images[:cut])
        test.append(images[cut:])

    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(os.path.join(args.out_dir, "train"), interleave(train))
    write_idx(os.path.join(args.out_dir, "t10k"), interleave(test))
    print(f"train: {sum(map(len, train))} images, test: {sum(map(len, test))} images")


if __name__ == "__main__":
    main()
