"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

Usage: python3 convert_npm_mnist.py <package/src/digits> <out_dir>

Each class is split 80/20 into train/test, then both partitions are shuffled
with a fixed seed so that class order is mixed. Pixel values are stored as
round(v * 255) bytes.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path




def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // 784
        rows = [bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]) for i in range(n)]
        cut = int(n * 0.8)
        train += [(r, digit) for r in rows[:cut]]
        test += [(r, digit) for r in rows[cut:]]
    rng = random.Random(1993)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, part in (("train", train), ("t10k", test)):
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for r, _ in part:
                f.write(r)
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(l for _, l in part))
        print(name, len(part))


if __name__ == "__main__":
    main()
