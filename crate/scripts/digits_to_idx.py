"""Build the gzipped IDX digit fixtures from the `mnist` npm package.

usage: digits_to_idx.py PACKAGE_DIR OUT_DIR [TRAIN_PER_DIGIT TEST_PER_DIGIT]

PACKAGE_DIR is the unpacked npm tarball (it holds src/digits/0.json ..
9.json, each {"data": [...]} with 784 floats in [0, 1] per image).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    head = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the output byte-stable
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(head + payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 200
    n_test = int(sys.argv[4]) if len(sys.argv) > 4 else 100
    train, test = [], []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        images = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        pixels = [bytes(min(255, max(0, round(v * 255))) for v in img) for img in images]
        train += [(p, digit) for p in pixels[:n_train]]
        test += [(p, digit) for p in pixels[n_train:n_train + n_test]]
    rng = random.Random(20240607)
    for name, rows in (("train", train), ("test", test)):
        rng.shuffle(rows)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(rows), 28, 28), b"".join(p for p, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(rows),), bytes(l for _, l in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
